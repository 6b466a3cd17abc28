//! Machine-readable and human-readable views of one set of trace rows.

use serde::Serialize;
use skimrnn::cell::Decision;

const READ_ON: &str = "\x1b[1;32m";
const READ_OFF: &str = "\x1b[0m";

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub sequence: usize,
    pub direction: String,
    pub position: usize,
    pub token: String,
    pub decision: Decision,
    pub p_read: f64,
    pub p_skim: f64,
}

pub fn jsonl(rows: &[TraceRow]) -> serde_json::Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One line per sequence and direction, read tokens in brackets (or green
/// with `color`), then an aggregate line.
pub fn text(rows: &[TraceRow], skim_rate: f64, flop_r: f64, color: bool) -> String {
    let mut out = String::new();
    let mut current: Option<(usize, &str)> = None;
    for r in rows {
        let key = (r.sequence, r.direction.as_str());
        if current != Some(key) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str(&format!("#{} {}:", r.sequence, r.direction));
            current = Some(key);
        }
        out.push(' ');
        match (r.decision, color) {
            (Decision::Read, false) => out.push_str(&format!("[{}]", r.token)),
            (Decision::Read, true) => out.push_str(&format!("{READ_ON}{}{READ_OFF}", r.token)),
            (Decision::Skim, _) => out.push_str(&r.token),
        }
    }
    if current.is_some() {
        out.push('\n');
    }
    out.push_str(&format!(
        "skim rate {skim_rate:.4} over {} decisions, Flop-R {flop_r:.3}\n",
        rows.len()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sequence: usize, position: usize, token: &str, decision: Decision) -> TraceRow {
        TraceRow {
            sequence,
            direction: "rnn".into(),
            position,
            token: token.into(),
            decision,
            p_read: 0.5,
            p_skim: 0.5,
        }
    }

    #[test]
    fn brackets_mark_reads() {
        let rows = [
            row(0, 0, "a", Decision::Read),
            row(0, 1, "b", Decision::Skim),
            row(1, 0, "c", Decision::Skim),
        ];
        let t = text(&rows, 2.0 / 3.0, 1.5, false);
        assert_eq!(t, "#0 rnn: [a] b\n#1 rnn: c\nskim rate 0.6667 over 3 decisions, Flop-R 1.500\n");
        assert_eq!(jsonl(&rows).unwrap().lines().count(), 3);
        assert!(jsonl(&rows).unwrap().contains("\"decision\":\"read\""));
    }
}
