//! Driving-domain attribute extraction and the structural consistency rules.
//!
//! Extraction is a deterministic phrase lexicon over the same cleaned token
//! stream the term extractor uses. A match is suppressed when a negation
//! token appears within the 3 tokens preceding the matched phrase.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::terms::clean_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightFact {
    Unknown,
    None,
    Red,
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PedestrianFact {
    Unknown,
    None,
    Sidewalk,
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionFact {
    Accelerate,
    Maintain,
    Slow,
    Stop,
    TurnLeft,
    TurnRight,
    OffsetLeft,
    OffsetRight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFacts {
    pub light: LightFact,
    pub pedestrian: PedestrianFact,
    pub ego_actions: BTreeSet<ActionFact>,
}

impl AttributeFacts {
    pub fn unknown() -> AttributeFacts {
        AttributeFacts {
            light: LightFact::Unknown,
            pedestrian: PedestrianFact::Unknown,
            ego_actions: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.light == LightFact::Unknown
            && self.pedestrian == PedestrianFact::Unknown
            && self.ego_actions.is_empty()
    }
}

const NEGATIONS: [&str; 8] = [
    "not", "no", "never", "isnt", "arent", "wont", "dont", "without",
];

enum Effect {
    Light(LightFact),
    Ped(PedestrianFact),
    Action(ActionFact),
}

/// The full lexicon, in priority order within each attribute: the first
/// non-suppressed match per attribute wins; actions accumulate.
fn lexicon() -> Vec<(&'static [&'static str], Effect)> {
    vec![
        // traffic light
        (&["no", "traffic", "light"], Effect::Light(LightFact::None)),
        (&["red", "light"], Effect::Light(LightFact::Red)),
        (&["light", "is", "red"], Effect::Light(LightFact::Red)),
        (&["light", "will", "stay", "red"], Effect::Light(LightFact::Red)),
        (&["light", "turns", "red"], Effect::Light(LightFact::Red)),
        (&["green", "light"], Effect::Light(LightFact::Green)),
        (&["light", "is", "green"], Effect::Light(LightFact::Green)),
        (
            &["light", "will", "remain", "green"],
            Effect::Light(LightFact::Green),
        ),
        (&["light", "turns", "green"], Effect::Light(LightFact::Green)),
        // pedestrian
        (&["no", "pedestrians"], Effect::Ped(PedestrianFact::None)),
        (&["no", "pedestrian"], Effect::Ped(PedestrianFact::None)),
        (
            &["free", "of", "pedestrians"],
            Effect::Ped(PedestrianFact::None),
        ),
        (
            &["crossing", "the", "road"],
            Effect::Ped(PedestrianFact::Crossing),
        ),
        (&["crossing"], Effect::Ped(PedestrianFact::Crossing)),
        (&["sidewalk"], Effect::Ped(PedestrianFact::Sidewalk)),
        // ego actions
        (&["accelerate"], Effect::Action(ActionFact::Accelerate)),
        (&["speed", "up"], Effect::Action(ActionFact::Accelerate)),
        (
            &["keep", "going", "at", "the", "same", "speed"],
            Effect::Action(ActionFact::Maintain),
        ),
        (&["maintain"], Effect::Action(ActionFact::Maintain)),
        (&["slow", "down"], Effect::Action(ActionFact::Slow)),
        (&["decelerate"], Effect::Action(ActionFact::Slow)),
        (&["brake", "to", "a", "stop"], Effect::Action(ActionFact::Stop)),
        (&["stop"], Effect::Action(ActionFact::Stop)),
        (&["turn", "left"], Effect::Action(ActionFact::TurnLeft)),
        (&["turn", "right"], Effect::Action(ActionFact::TurnRight)),
        (&["offset", "left"], Effect::Action(ActionFact::OffsetLeft)),
        (&["offset", "right"], Effect::Action(ActionFact::OffsetRight)),
    ]
}

fn phrase_matches(tokens: &[String], phrase: &[&str]) -> Vec<usize> {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return vec![];
    }
    (0..=tokens.len() - phrase.len())
        .filter(|&i| phrase.iter().zip(&tokens[i..]).all(|(p, t)| p == t))
        .collect()
}

fn negated(tokens: &[String], start: usize) -> bool {
    let lo = start.saturating_sub(3);
    tokens[lo..start]
        .iter()
        .any(|t| NEGATIONS.contains(&t.as_str()))
}

pub fn extract_attributes(text: &str) -> AttributeFacts {
    let tokens = clean_tokens(text);
    let mut facts = AttributeFacts::unknown();
    for (phrase, effect) in lexicon() {
        // the pedestrian-"crossing" keyword needs a pedestrian in context;
        // "crossing the road" alone is enough (the road context implies it)
        if phrase == ["crossing"]
            && !tokens.iter().any(|t| t == "pedestrian" || t == "pedestrians")
        {
            continue;
        }
        for start in phrase_matches(&tokens, phrase) {
            if negated(&tokens, start) {
                continue;
            }
            match effect {
                Effect::Light(l) => {
                    if facts.light == LightFact::Unknown {
                        facts.light = l;
                    }
                }
                Effect::Ped(p) => {
                    if facts.pedestrian == PedestrianFact::Unknown {
                        facts.pedestrian = p;
                    }
                }
                Effect::Action(a) => {
                    facts.ego_actions.insert(a);
                }
            }
            break;
        }
    }
    facts
}

/// StructConsist = 1 − contradictions / rule checks, over the rule table:
/// 1. pedestrian=crossing ∧ plan ∋ (accelerate|maintain)
/// 2. light=red ∧ plan ∋ (maintain|accelerate)
/// 3. light=green ∧ plan ∋ stop ∧ pedestrian≠crossing
///
/// A rule counts as a check only when its antecedent attribute is present
/// upstream AND the plan has extractable actions. `None` when no rule
/// applies.
pub fn structural_consistency(upstream: &AttributeFacts, plan: &AttributeFacts) -> Option<f64> {
    if plan.ego_actions.is_empty() {
        return None;
    }
    let mut checks = 0usize;
    let mut contradictions = 0usize;
    let has = |a: ActionFact| plan.ego_actions.contains(&a);

    if upstream.pedestrian == PedestrianFact::Crossing {
        checks += 1;
        if has(ActionFact::Accelerate) || has(ActionFact::Maintain) {
            contradictions += 1;
        }
    }
    if upstream.light == LightFact::Red {
        checks += 1;
        if has(ActionFact::Maintain) || has(ActionFact::Accelerate) {
            contradictions += 1;
        }
    }
    if upstream.light == LightFact::Green && upstream.pedestrian != PedestrianFact::Crossing {
        checks += 1;
        if has(ActionFact::Stop) {
            contradictions += 1;
        }
    }
    if checks == 0 {
        return None;
    }
    Some(1.0 - contradictions as f64 / checks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acts(facts: &AttributeFacts) -> Vec<ActionFact> {
        facts.ego_actions.iter().copied().collect()
    }

    #[test]
    fn empty_text_all_unknown() {
        let f = extract_attributes("");
        assert!(f.is_empty());
    }

    #[test]
    fn maintain_phrase_from_lexicon() {
        let f = extract_attributes("The action is to keep going at the same speed");
        assert_eq!(acts(&f), vec![ActionFact::Maintain]);
    }

    #[test]
    fn crossing_with_pedestrian_context() {
        let f = extract_attributes("a pedestrian is crossing the road ahead");
        assert_eq!(f.pedestrian, PedestrianFact::Crossing);
        // "crossing the road" without any pedestrian word still counts
        let f = extract_attributes("someone crossing the road");
        assert_eq!(f.pedestrian, PedestrianFact::Crossing);
        // bare "crossing" without pedestrian context does not
        let f = extract_attributes("a zebra crossing sign");
        assert_eq!(f.pedestrian, PedestrianFact::Unknown);
    }

    #[test]
    fn negation_window_flips_matches() {
        let f = extract_attributes("the pedestrian is not crossing the road");
        assert_eq!(f.pedestrian, PedestrianFact::Unknown);
        let f = extract_attributes("the ego vehicle should not stop here");
        assert!(f.ego_actions.is_empty());
        // negation more than 3 tokens away no longer suppresses
        let f = extract_attributes("not sure but really the pedestrian keeps crossing");
        assert_eq!(f.pedestrian, PedestrianFact::Crossing);
    }

    #[test]
    fn light_variants() {
        assert_eq!(extract_attributes("there is a red light ahead").light, LightFact::Red);
        assert_eq!(
            extract_attributes("the light will stay red for now").light,
            LightFact::Red
        );
        assert_eq!(
            extract_attributes("the light will remain green").light,
            LightFact::Green
        );
        assert_eq!(
            extract_attributes("no traffic light is visible").light,
            LightFact::None
        );
    }

    #[test]
    fn stopped_lead_vehicle_is_not_a_stop_action() {
        let f = extract_attributes("the vehicle ahead has stopped");
        assert!(f.ego_actions.is_empty());
        let f = extract_attributes("brake to a stop");
        assert_eq!(acts(&f), vec![ActionFact::Stop]);
    }

    #[test]
    fn rule_traces() {
        let crossing = AttributeFacts {
            light: LightFact::Unknown,
            pedestrian: PedestrianFact::Crossing,
            ego_actions: BTreeSet::new(),
        };
        let maintain = AttributeFacts {
            light: LightFact::Unknown,
            pedestrian: PedestrianFact::Unknown,
            ego_actions: [ActionFact::Maintain].into(),
        };
        let slow = AttributeFacts {
            ego_actions: [ActionFact::Slow].into(),
            ..maintain.clone()
        };
        assert_eq!(structural_consistency(&crossing, &maintain), Some(0.0));
        assert_eq!(structural_consistency(&crossing, &slow), Some(1.0));
        // no extractable attributes on either side → absent
        assert_eq!(
            structural_consistency(&AttributeFacts::unknown(), &AttributeFacts::unknown()),
            None
        );
        // plan actions but no upstream antecedent → no applicable rule
        assert_eq!(
            structural_consistency(&AttributeFacts::unknown(), &maintain),
            None
        );
    }

    #[test]
    fn green_stop_rule_respects_crossing_exception() {
        let green = AttributeFacts {
            light: LightFact::Green,
            pedestrian: PedestrianFact::None,
            ego_actions: BTreeSet::new(),
        };
        let stop = AttributeFacts {
            light: LightFact::Unknown,
            pedestrian: PedestrianFact::Unknown,
            ego_actions: [ActionFact::Stop].into(),
        };
        assert_eq!(structural_consistency(&green, &stop), Some(0.0));
        let green_crossing = AttributeFacts {
            pedestrian: PedestrianFact::Crossing,
            ..green
        };
        // crossing pedestrian makes stopping at green consistent; the
        // crossing rule itself is checked and passes
        assert_eq!(structural_consistency(&green_crossing, &stop), Some(1.0));
    }

    #[test]
    fn two_rules_one_contradiction_is_half() {
        let up = AttributeFacts {
            light: LightFact::Red,
            pedestrian: PedestrianFact::Crossing,
            ego_actions: BTreeSet::new(),
        };
        // stop is fine for the crossing rule and fine for red → 1.0
        let stop = AttributeFacts {
            light: LightFact::Unknown,
            pedestrian: PedestrianFact::Unknown,
            ego_actions: [ActionFact::Stop].into(),
        };
        assert_eq!(structural_consistency(&up, &stop), Some(1.0));
        // maintain contradicts both rules → 0.0
        let maintain = AttributeFacts {
            ego_actions: [ActionFact::Maintain].into(),
            ..stop.clone()
        };
        assert_eq!(structural_consistency(&up, &maintain), Some(0.0));
    }
}
