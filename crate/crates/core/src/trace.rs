use crate::cell::Decision;
use serde::{Deserialize, Serialize};

/// One step of a recurrent unit's decision record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub decision: Decision,
    pub p_read: f64,
    pub p_skim: f64,
}

impl StepRecord {
    pub fn new(decision: Decision, p: [f64; 2]) -> Self {
        Self {
            decision,
            p_read: p[0],
            p_skim: p[1],
        }
    }
}

/// Per-token decisions of a single recurrent direction, in input order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub steps: Vec<StepRecord>,
}

impl DecisionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn skim_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.decision == Decision::Skim)
            .count()
    }

    pub fn decisions(&self) -> impl Iterator<Item = Decision> + '_ {
        self.steps.iter().map(|s| s.decision)
    }
}

/// Traces of every recurrent direction in a model, e.g. `"rnn"` for the
/// classifier or `"l1.fw"` for the QA model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTrace {
    pub directions: Vec<(String, DecisionTrace)>,
}

impl ModelTrace {
    pub fn single(name: &str, trace: DecisionTrace) -> Self {
        Self {
            directions: vec![(name.to_string(), trace)],
        }
    }

    pub fn get(&self, name: &str) -> Option<&DecisionTrace> {
        self.directions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn total_steps(&self) -> usize {
        self.directions.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn total_skims(&self) -> usize {
        self.directions.iter().map(|(_, t)| t.skim_count()).sum()
    }
}
