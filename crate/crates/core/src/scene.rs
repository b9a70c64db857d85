//! Synthetic driving-scene dataset: ground-truth scene attributes, templated
//! gold QA per stage, visual-prefix encoding, and DriveLM-format ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::XorShiftRng;
use crate::stage::StageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficLight {
    None,
    Red,
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pedestrian {
    None,
    OnSidewalk,
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadVehicle {
    None,
    Moving,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoAction {
    Accelerate,
    Maintain,
    Slow,
    Stop,
    TurnLeft,
    TurnRight,
}

impl EgoAction {
    pub const ALL: [EgoAction; 6] = [
        EgoAction::Accelerate,
        EgoAction::Maintain,
        EgoAction::Slow,
        EgoAction::Stop,
        EgoAction::TurnLeft,
        EgoAction::TurnRight,
    ];

    /// Surface phrase used in planning answers; the contradiction-trigger
    /// vocabulary appears verbatim so rule extraction has guaranteed coverage.
    pub fn phrase(self) -> &'static str {
        match self {
            EgoAction::Accelerate => "accelerate",
            EgoAction::Maintain => "keep going at the same speed",
            EgoAction::Slow => "slow down",
            EgoAction::Stop => "brake to a stop",
            EgoAction::TurnLeft => "turn left",
            EgoAction::TurnRight => "turn right",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SceneSpec {
    pub scene_id: u64,
    pub traffic_light: TrafficLight,
    pub pedestrian: Pedestrian,
    pub lead_vehicle: LeadVehicle,
    pub gold_ego_action: EgoAction,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StageQA {
    pub question: String,
    pub gold_answer: String,
}

/// Three (question, gold answer) pairs, ordered Perception → Prediction → Planning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct QATriple {
    pub scene_id: u64,
    pub stages: [StageQA; 3],
}

impl QATriple {
    pub fn stage(&self, s: StageId) -> &StageQA {
        &self.stages[s.index()]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: SceneSpec,
    pub qa: QATriple,
    /// Validation slice pairing a hazard with distractor text.
    #[serde(default)]
    pub adversarial: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

pub const PERCEPTION_QUESTION: &str =
    "What objects and signals are present around the ego vehicle?";
pub const PREDICTION_QUESTION: &str = "What will the important objects do next?";
pub const PLANNING_QUESTION: &str = "What action should the ego vehicle take and why?";

pub fn canonical_question(stage: StageId) -> &'static str {
    match stage {
        StageId::Perception => PERCEPTION_QUESTION,
        StageId::Prediction => PREDICTION_QUESTION,
        StageId::Planning => PLANNING_QUESTION,
    }
}

// Sentence templates. Two synonym variants per slot keep the task learnable
// without being trivially memorizable. Sentences are separated by a
// standalone "." token to keep the closed vocabulary small.

const PERC_LIGHT: [[&str; 2]; 3] = [
    ["no traffic light is visible", "there is no traffic light ahead"],
    ["there is a red light ahead", "a red light is visible ahead"],
    ["there is a green light ahead", "a green light is visible ahead"],
];
const PERC_PED: [[&str; 2]; 3] = [
    ["no pedestrians are visible", "there are no pedestrians nearby"],
    [
        "a pedestrian is walking on the sidewalk",
        "pedestrians are standing on the sidewalk",
    ],
    [
        "a pedestrian is crossing the road",
        "one pedestrian is crossing the road ahead",
    ],
];
const PERC_LEAD: [[&str; 2]; 3] = [
    ["no lead vehicle is present", "the lane ahead is clear"],
    [
        "a lead vehicle is moving ahead",
        "the vehicle ahead is moving forward",
    ],
    [
        "a lead vehicle is stopped ahead",
        "the vehicle ahead has stopped",
    ],
];

const PRED_LIGHT: [[&str; 2]; 3] = [
    ["no signal changes are expected", "the signals will not change"],
    ["the light will stay red for now", "the red light will persist"],
    ["the light will remain green", "the green light will hold"],
];
const PRED_PED: [[&str; 2]; 3] = [
    [
        "no pedestrians will enter the path",
        "the path will stay free of pedestrians",
    ],
    [
        "the pedestrian will stay on the sidewalk",
        "the pedestrian will keep walking on the sidewalk",
    ],
    [
        "the pedestrian will continue crossing the road",
        "the pedestrian will keep crossing ahead",
    ],
];
const PRED_LEAD: [[&str; 2]; 3] = [
    ["the lane ahead will stay clear", "no vehicle will block the lane"],
    [
        "the lead vehicle will keep moving forward",
        "the vehicle ahead will continue forward",
    ],
    [
        "the lead vehicle will remain stopped",
        "the vehicle ahead will stay stopped",
    ],
];

const PLAN_OPENERS: [&str; 2] = [
    "the ego vehicle should",
    "the best action is to",
];

const DISTRACTORS: [&str; 4] = [
    "brick buildings line the street",
    "the road surface is wet",
    "construction barriers stand to the side",
    "parked cars sit along the roadside",
];

fn light_index(l: TrafficLight) -> usize {
    match l {
        TrafficLight::None => 0,
        TrafficLight::Red => 1,
        TrafficLight::Green => 2,
    }
}

fn ped_index(p: Pedestrian) -> usize {
    match p {
        Pedestrian::None => 0,
        Pedestrian::OnSidewalk => 1,
        Pedestrian::Crossing => 2,
    }
}

fn lead_index(v: LeadVehicle) -> usize {
    match v {
        LeadVehicle::None => 0,
        LeadVehicle::Moving => 1,
        LeadVehicle::Stopped => 2,
    }
}

/// Gold actions consistent with the structural rule table, by construction.
pub fn allowed_actions(
    light: TrafficLight,
    ped: Pedestrian,
    lead: LeadVehicle,
) -> Vec<EgoAction> {
    if ped == Pedestrian::Crossing || light == TrafficLight::Red {
        vec![EgoAction::Slow, EgoAction::Stop]
    } else if lead == LeadVehicle::Stopped {
        if light == TrafficLight::Green {
            vec![EgoAction::Slow, EgoAction::TurnLeft, EgoAction::TurnRight]
        } else {
            vec![
                EgoAction::Slow,
                EgoAction::Stop,
                EgoAction::TurnLeft,
                EgoAction::TurnRight,
            ]
        }
    } else if light == TrafficLight::Green {
        vec![
            EgoAction::Accelerate,
            EgoAction::Maintain,
            EgoAction::TurnLeft,
            EgoAction::TurnRight,
        ]
    } else {
        vec![
            EgoAction::Accelerate,
            EgoAction::Maintain,
            EgoAction::Slow,
            EgoAction::TurnLeft,
            EgoAction::TurnRight,
        ]
    }
}

fn plan_reason(scene: &SceneSpec) -> &'static str {
    if scene.pedestrian == Pedestrian::Crossing {
        "a pedestrian is crossing the road"
    } else if scene.traffic_light == TrafficLight::Red {
        "there is a red light ahead"
    } else if scene.lead_vehicle == LeadVehicle::Stopped {
        "the vehicle ahead has stopped"
    } else if scene.traffic_light == TrafficLight::Green {
        "the light is green and the way is clear"
    } else {
        "the road ahead is clear"
    }
}

fn render_qa(scene: &SceneSpec, rng: &mut XorShiftRng, distractors: usize) -> QATriple {
    let pick = |rng: &mut XorShiftRng| rng.next_below(2);
    let li = light_index(scene.traffic_light);
    let pi = ped_index(scene.pedestrian);
    let vi = lead_index(scene.lead_vehicle);

    let mut perc_sentences = vec![
        PERC_LIGHT[li][pick(rng)].to_string(),
        PERC_PED[pi][pick(rng)].to_string(),
        PERC_LEAD[vi][pick(rng)].to_string(),
    ];
    for k in 0..distractors {
        perc_sentences.push(DISTRACTORS[(rng.next_below(DISTRACTORS.len()) + k) % DISTRACTORS.len()].to_string());
    }
    let perception = perc_sentences.join(" . ");

    let prediction = [
        PRED_PED[pi][pick(rng)].to_string(),
        PRED_LIGHT[li][pick(rng)].to_string(),
        PRED_LEAD[vi][pick(rng)].to_string(),
    ]
    .join(" . ");

    let planning = format!(
        "{} {} because {}",
        PLAN_OPENERS[pick(rng)],
        scene.gold_ego_action.phrase(),
        plan_reason(scene)
    );

    QATriple {
        scene_id: scene.scene_id,
        stages: [
            StageQA {
                question: PERCEPTION_QUESTION.to_string(),
                gold_answer: perception,
            },
            StageQA {
                question: PREDICTION_QUESTION.to_string(),
                gold_answer: prediction,
            },
            StageQA {
                question: PLANNING_QUESTION.to_string(),
                gold_answer: planning,
            },
        ],
    }
}

fn sample_scene(scene_id: u64, rng: &mut XorShiftRng) -> SceneSpec {
    let light = [TrafficLight::None, TrafficLight::Red, TrafficLight::Green]
        [rng.next_below(3)];
    let ped = [Pedestrian::None, Pedestrian::OnSidewalk, Pedestrian::Crossing]
        [rng.next_below(3)];
    let lead = [LeadVehicle::None, LeadVehicle::Moving, LeadVehicle::Stopped]
        [rng.next_below(3)];
    let allowed = allowed_actions(light, ped, lead);
    let gold = allowed[rng.next_below(allowed.len())];
    SceneSpec {
        scene_id,
        traffic_light: light,
        pedestrian: ped,
        lead_vehicle: lead,
        gold_ego_action: gold,
    }
}

/// Deterministic synthetic dataset. Train gets `round(n * split_frac)`
/// scenes, validation the rest; 10% of validation scenes are rewritten as an
/// adversarial slice (forced hazard plus distractor sentences).
pub fn generate_dataset(seed: u64, n_scenes: usize, split_frac: f64) -> Result<Dataset> {
    if n_scenes < 10 {
        return Err(Error::Usage(format!(
            "n_scenes must be >= 10, got {n_scenes}"
        )));
    }
    if !(0.0 < split_frac && split_frac < 1.0) {
        return Err(Error::Usage("split_frac must be in (0,1)".into()));
    }
    let mut rng = XorShiftRng::new(XorShiftRng::derive(seed, "dataset"));
    let mut records = Vec::with_capacity(n_scenes);
    for id in 0..n_scenes {
        let scene = sample_scene(id as u64, &mut rng);
        let qa = render_qa(&scene, &mut rng, 0);
        records.push(SceneRecord {
            scene,
            qa,
            adversarial: false,
        });
    }
    let n_train = (n_scenes as f64 * split_frac).round() as usize;
    let val: Vec<SceneRecord> = records.split_off(n_train);
    let train = records;

    let mut val = val;
    let n_adv = val.len() / 10;
    let mut adv_rng = XorShiftRng::new(XorShiftRng::derive(seed, "adversarial"));
    for rec in val.iter_mut().take(n_adv) {
        // force a hazard and re-derive a consistent gold action
        if adv_rng.next_below(2) == 0 {
            rec.scene.pedestrian = Pedestrian::Crossing;
        } else {
            rec.scene.traffic_light = TrafficLight::Red;
        }
        let allowed = allowed_actions(
            rec.scene.traffic_light,
            rec.scene.pedestrian,
            rec.scene.lead_vehicle,
        );
        rec.scene.gold_ego_action = allowed[adv_rng.next_below(allowed.len())];
        rec.qa = render_qa(&rec.scene, &mut adv_rng, 2);
        rec.adversarial = true;
    }
    Ok(Dataset { seed, train, val })
}

/// Visual-prefix token ids: one slot per scene attribute, value-distinct ids.
/// Slot bases: light 0, pedestrian 3, lead vehicle 6, gold action 9.
pub fn encode_scene(scene: &SceneSpec) -> Vec<usize> {
    vec![
        light_index(scene.traffic_light),
        3 + ped_index(scene.pedestrian),
        6 + lead_index(scene.lead_vehicle),
        9 + scene.gold_ego_action as usize,
    ]
}

/// Inverse of `encode_scene` (scene_id is not carried by the prefix).
pub fn decode_scene(ids: &[usize]) -> Result<SceneSpec> {
    if ids.len() != 4 {
        return Err(Error::Data(format!(
            "visual prefix must have 4 slots, got {}",
            ids.len()
        )));
    }
    let light = match ids[0] {
        0 => TrafficLight::None,
        1 => TrafficLight::Red,
        2 => TrafficLight::Green,
        other => return Err(Error::Data(format!("bad light slot {other}"))),
    };
    let ped = match ids[1] {
        3 => Pedestrian::None,
        4 => Pedestrian::OnSidewalk,
        5 => Pedestrian::Crossing,
        other => return Err(Error::Data(format!("bad pedestrian slot {other}"))),
    };
    let lead = match ids[2] {
        6 => LeadVehicle::None,
        7 => LeadVehicle::Moving,
        8 => LeadVehicle::Stopped,
        other => return Err(Error::Data(format!("bad lead slot {other}"))),
    };
    let action = EgoAction::ALL
        .get(ids[3].wrapping_sub(9))
        .copied()
        .ok_or_else(|| Error::Data(format!("bad action slot {}", ids[3])))?;
    Ok(SceneSpec {
        scene_id: 0,
        traffic_light: light,
        pedestrian: ped,
        lead_vehicle: lead,
        gold_ego_action: action,
    })
}

/// The closed word vocabulary: every word that can appear in questions, gold
/// answers, or chain prompt templates.
pub fn task_vocabulary() -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let mut add = |text: &str| {
        for w in text.split_whitespace() {
            words.insert(w.to_string());
        }
    };
    for group in [&PERC_LIGHT, &PERC_PED, &PERC_LEAD, &PRED_LIGHT, &PRED_PED, &PRED_LEAD] {
        for variants in group.iter() {
            for v in variants {
                add(v);
            }
        }
    }
    for o in PLAN_OPENERS {
        add(o);
    }
    for d in DISTRACTORS {
        add(d);
    }
    for a in EgoAction::ALL {
        add(a.phrase());
    }
    add("the light is green and the way is clear");
    add("the road ahead is clear");
    add(PERCEPTION_QUESTION);
    add(PREDICTION_QUESTION);
    add(PLANNING_QUESTION);
    add("because . <scene> Q: A: Perception: Prediction: Now answer:");
    words.into_iter().collect()
}

pub fn save_jsonl(records: &[SceneRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SceneRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset file {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Ingest DriveLM-format QA records (text only, evaluation workflows).
/// Accepts the public v1.1 nesting `scene → key_frames → frame → QA →
/// {perception, prediction, planning} → [{Q, A}, ...]`, takes the first QA
/// pair per stage, skips keyframes missing a stage, and counts the skips.
pub fn load_drivelm_qa(path: &Path) -> Result<(Vec<QATriple>, usize)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "DriveLM file {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok((Vec::new(), 0));
    }
    let root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let scenes = root
        .as_object()
        .ok_or_else(|| Error::Data("DriveLM root must be an object".into()))?;
    let mut out = Vec::new();
    let mut warnings = 0usize;
    let mut next_id = 0u64;
    for (_scene_token, scene_val) in scenes {
        let Some(frames) = scene_val.get("key_frames").and_then(|v| v.as_object()) else {
            warnings += 1;
            continue;
        };
        for (_frame_token, frame_val) in frames {
            let Some(qa) = frame_val.get("QA").and_then(|v| v.as_object()) else {
                warnings += 1;
                continue;
            };
            let mut stages = Vec::with_capacity(3);
            for key in ["perception", "prediction", "planning"] {
                let pair = qa
                    .get(key)
                    .and_then(|v| v.as_array())
                    .and_then(|a| a.first())
                    .and_then(|first| {
                        let q = first.get("Q").and_then(|v| v.as_str())?;
                        let a = first.get("A").and_then(|v| v.as_str())?;
                        Some(StageQA {
                            question: q.to_string(),
                            gold_answer: a.to_string(),
                        })
                    });
                if let Some(p) = pair {
                    stages.push(p);
                }
            }
            match <[StageQA; 3]>::try_from(stages) {
                Ok(stages) => {
                    out.push(QATriple {
                        scene_id: next_id,
                        stages,
                    });
                    next_id += 1;
                }
                Err(_) => warnings += 1,
            }
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_deterministic_under_seed() {
        let a = generate_dataset(7, 50, 0.8).unwrap();
        let b = generate_dataset(7, 50, 0.8).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_dataset(8, 50, 0.8).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn split_sizes_round() {
        let d = generate_dataset(1, 50, 0.8).unwrap();
        assert_eq!(d.train.len(), 40);
        assert_eq!(d.val.len(), 10);
        let d = generate_dataset(1, 11, 0.8).unwrap();
        assert_eq!(d.train.len(), 9);
        assert_eq!(d.val.len(), 2);
    }

    #[test]
    fn too_few_scenes_is_usage_error() {
        assert!(matches!(
            generate_dataset(1, 5, 0.8),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gold_action_respects_rules() {
        let d = generate_dataset(3, 500, 0.8).unwrap();
        for rec in d.train.iter().chain(d.val.iter()) {
            let s = &rec.scene;
            if s.pedestrian == Pedestrian::Crossing {
                assert!(matches!(s.gold_ego_action, EgoAction::Slow | EgoAction::Stop));
            }
            if s.traffic_light == TrafficLight::Red {
                assert!(!matches!(
                    s.gold_ego_action,
                    EgoAction::Maintain | EgoAction::Accelerate
                ));
            }
            if s.traffic_light == TrafficLight::Green && s.pedestrian != Pedestrian::Crossing {
                assert_ne!(s.gold_ego_action, EgoAction::Stop);
            }
        }
    }

    #[test]
    fn attribute_floor_five_percent() {
        let d = generate_dataset(11, 2000, 0.8).unwrap();
        let all: Vec<&SceneRecord> = d.train.iter().chain(d.val.iter()).collect();
        let n = all.len() as f64;
        for target in 0..3 {
            for value in 0..3usize {
                let count = all
                    .iter()
                    .filter(|r| {
                        let s = &r.scene;
                        match target {
                            0 => light_index(s.traffic_light) == value,
                            1 => ped_index(s.pedestrian) == value,
                            _ => lead_index(s.lead_vehicle) == value,
                        }
                    })
                    .count();
                assert!(count as f64 / n >= 0.05, "attribute {target} value {value}");
            }
        }
        for action in EgoAction::ALL {
            let count = all.iter().filter(|r| r.scene.gold_ego_action == action).count();
            assert!(count as f64 / n >= 0.02, "action {action:?} at {count}");
        }
    }

    #[test]
    fn encode_decode_bijection() {
        let d = generate_dataset(5, 100, 0.8).unwrap();
        for rec in d.train.iter().chain(d.val.iter()) {
            let ids = encode_scene(&rec.scene);
            assert_eq!(ids.len(), 4);
            let mut back = decode_scene(&ids).unwrap();
            back.scene_id = rec.scene.scene_id;
            assert_eq!(back, rec.scene);
        }
    }

    #[test]
    fn one_attribute_diff_one_slot_diff() {
        let base = SceneSpec {
            scene_id: 0,
            traffic_light: TrafficLight::Red,
            pedestrian: Pedestrian::None,
            lead_vehicle: LeadVehicle::Moving,
            gold_ego_action: EgoAction::Slow,
        };
        let mut other = base.clone();
        other.pedestrian = Pedestrian::Crossing;
        let (a, b) = (encode_scene(&base), encode_scene(&other));
        let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
        assert_eq!(encode_scene(&base), encode_scene(&base.clone()));
    }

    #[test]
    fn vocabulary_covers_all_rendered_text() {
        let words = task_vocabulary();
        let set: BTreeSet<&str> = words.iter().map(|s| s.as_str()).collect();
        let d = generate_dataset(9, 200, 0.8).unwrap();
        for rec in d.train.iter().chain(d.val.iter()) {
            for stage in &rec.qa.stages {
                for w in stage.question.split_whitespace() {
                    assert!(set.contains(w), "missing question word {w}");
                }
                for w in stage.gold_answer.split_whitespace() {
                    assert!(set.contains(w), "missing answer word {w}");
                }
            }
        }
    }

    #[test]
    fn adversarial_slice_flagged_and_hazardous() {
        let d = generate_dataset(13, 400, 0.8).unwrap();
        let adv: Vec<&SceneRecord> = d.val.iter().filter(|r| r.adversarial).collect();
        assert_eq!(adv.len(), d.val.len() / 10);
        for rec in adv {
            assert!(
                rec.scene.pedestrian == Pedestrian::Crossing
                    || rec.scene.traffic_light == TrafficLight::Red
            );
        }
        assert!(d.train.iter().all(|r| !r.adversarial));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(2, 20, 0.8).unwrap();
        let p = dir.path().join("train.jsonl");
        save_jsonl(&d.train, &p).unwrap();
        let back = load_jsonl(&p).unwrap();
        assert_eq!(back.len(), d.train.len());
        assert_eq!(
            serde_json::to_string(&back[0]).unwrap(),
            serde_json::to_string(&d.train[0]).unwrap()
        );
    }

    #[test]
    fn drivelm_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("drivelm.json");
        std::fs::write(&p, "").unwrap();
        let (list, warnings) = load_drivelm_qa(&p).unwrap();
        assert!(list.is_empty());
        assert_eq!(warnings, 0);
    }

    #[test]
    fn drivelm_partial_record_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("drivelm.json");
        let doc = serde_json::json!({
            "scene1": {"key_frames": {"f1": {"QA": {
                "perception": [{"Q": "What is visible?", "A": "A car."}],
                "prediction": [{"Q": "What next?", "A": "It moves."}]
            }}}}
        });
        std::fs::write(&p, serde_json::to_string(&doc).unwrap()).unwrap();
        let (list, warnings) = load_drivelm_qa(&p).unwrap();
        assert!(list.is_empty());
        assert_eq!(warnings, 1);
    }

    #[test]
    fn drivelm_full_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("drivelm.json");
        let doc = serde_json::json!({
            "scene1": {"key_frames": {"f1": {"QA": {
                "perception": [{"Q": "What is visible?", "A": "A pedestrian crossing the road."}],
                "prediction": [{"Q": "What next?", "A": "The pedestrian keeps crossing."}],
                "planning": [{"Q": "What action?", "A": "Slow down."}]
            }}}}
        });
        std::fs::write(&p, serde_json::to_string(&doc).unwrap()).unwrap();
        let (list, warnings) = load_drivelm_qa(&p).unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(warnings, 0);
        assert_eq!(list[0].stages[2].gold_answer, "Slow down.");
    }

    #[test]
    fn drivelm_malformed_json_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("drivelm.json");
        std::fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_drivelm_qa(&p), Err(Error::Data(_))));
    }
}
