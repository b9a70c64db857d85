//! Stage identifiers for the three-stage reasoning chain.

use serde::{Deserialize, Serialize};

/// Perception < Prediction < Planning; chain execution visits stages in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    Perception,
    Prediction,
    Planning,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::Perception, StageId::Prediction, StageId::Planning];

    pub fn index(self) -> usize {
        match self {
            StageId::Perception => 0,
            StageId::Prediction => 1,
            StageId::Planning => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::Perception => "perception",
            StageId::Prediction => "prediction",
            StageId::Planning => "planning",
        }
    }

    pub fn parse(s: &str) -> Option<StageId> {
        match s.to_ascii_lowercase().as_str() {
            "perc" | "perception" => Some(StageId::Perception),
            "pred" | "prediction" => Some(StageId::Prediction),
            "plan" | "planning" => Some(StageId::Planning),
            _ => None,
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Projector transitions between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    PercToPred,
    PredToPlan,
    PercToPlanSkip,
}

impl Transition {
    pub fn name(self) -> &'static str {
        match self {
            Transition::PercToPred => "perc_to_pred",
            Transition::PredToPlan => "pred_to_plan",
            Transition::PercToPlanSkip => "perc_to_plan_skip",
        }
    }

    pub fn parse(s: &str) -> Option<Transition> {
        match s {
            "perc_to_pred" => Some(Transition::PercToPred),
            "pred_to_plan" => Some(Transition::PredToPlan),
            "perc_to_plan_skip" => Some(Transition::PercToPlanSkip),
            _ => None,
        }
    }
}

impl std::fmt::Display for Transition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
