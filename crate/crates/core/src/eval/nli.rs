//! NLI scoring backends: a deterministic heuristic oracle for offline runs
//! and tests, and a remote HTTP client so a real classifier can be attached.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::attributes::{extract_attributes, structural_consistency};
use super::terms::lexical_overlap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub entail: f64,
    pub neutral: f64,
    pub contra: f64,
}

impl NliVerdict {
    /// Clamp to [0,1] and renormalize to the simplex; any degenerate
    /// response becomes uniform.
    pub fn normalized(self) -> NliVerdict {
        let e = self.entail.clamp(0.0, 1.0);
        let n = self.neutral.clamp(0.0, 1.0);
        let c = self.contra.clamp(0.0, 1.0);
        let sum = e + n + c;
        if !sum.is_finite() || sum <= 0.0 {
            return NliVerdict {
                entail: 1.0 / 3.0,
                neutral: 1.0 / 3.0,
                contra: 1.0 / 3.0,
            };
        }
        NliVerdict {
            entail: e / sum,
            neutral: n / sum,
            contra: c / sum,
        }
    }
}

/// A backend returns `Ok(None)` when the record must be marked absent
/// (timeout, protocol error); absent records are excluded from aggregates,
/// never zero-filled.
pub trait NliBackend {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<Option<NliVerdict>>;

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<Option<NliVerdict>>> {
        pairs
            .iter()
            .map(|(p, h)| self.score(p, h))
            .collect()
    }
}

/// Deterministic test oracle, not a claim of NLI fidelity:
/// - structural rule table fires across the pair → p_contra = 0.95,
///   remainder neutral;
/// - otherwise p_entail = 0.9 · lexical_overlap(premise, hypothesis)
///   (0 when overlap is absent), remainder neutral; p_contra = 0.
pub struct HeuristicNli;

impl NliBackend for HeuristicNli {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<Option<NliVerdict>> {
        let up = extract_attributes(premise);
        let plan = extract_attributes(hypothesis);
        let fired = matches!(structural_consistency(&up, &plan), Some(s) if s < 1.0);
        let v = if fired {
            NliVerdict {
                entail: 0.0,
                neutral: 0.05,
                contra: 0.95,
            }
        } else {
            let entail = 0.9 * lexical_overlap(premise, hypothesis).unwrap_or(0.0);
            NliVerdict {
                entail,
                neutral: 1.0 - entail,
                contra: 0.0,
            }
        };
        Ok(Some(v.normalized()))
    }
}

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct NliResponse {
    entail: f64,
    neutral: f64,
    contradiction: f64,
}

impl From<NliResponse> for NliVerdict {
    fn from(r: NliResponse) -> NliVerdict {
        NliVerdict {
            entail: r.entail,
            neutral: r.neutral,
            contra: r.contradiction,
        }
        .normalized()
    }
}

/// HTTP client for an external classifier. Wire protocol:
/// `POST {base}/nli` with `{"premise": ..., "hypothesis": ...}` returning
/// `{"entail": e, "neutral": n, "contradiction": c}`; `POST {base}/nli/batch`
/// with an array of request objects returning an array of responses. Non-2xx
/// responses or calls exceeding the timeout (default 10 s) mark the record
/// absent.
pub struct RemoteNli {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl RemoteNli {
    pub fn new(base_url: &str) -> Result<RemoteNli> {
        Self::with_timeout(base_url, Duration::from_secs(10))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<RemoteNli> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Nli(format!("client build: {e}")))?;
        Ok(RemoteNli {
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }
}

impl NliBackend for RemoteNli {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<Option<NliVerdict>> {
        let url = format!("{}/nli", self.base_url);
        let resp = self
            .client
            .post(&url)
            .json(&NliRequest { premise, hypothesis })
            .send();
        let resp = match resp {
            Ok(r) if r.status().is_success() => r,
            _ => return Ok(None),
        };
        match resp.json::<NliResponse>() {
            Ok(r) => Ok(Some(r.into())),
            Err(_) => Ok(None),
        }
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<Option<NliVerdict>>> {
        let url = format!("{}/nli/batch", self.base_url);
        let body: Vec<NliRequest> = pairs
            .iter()
            .map(|(p, h)| NliRequest {
                premise: p,
                hypothesis: h,
            })
            .collect();
        let resp = self.client.post(&url).json(&body).send();
        let resp = match resp {
            Ok(r) if r.status().is_success() => r,
            _ => return Ok(vec![None; pairs.len()]),
        };
        match resp.json::<Vec<NliResponse>>() {
            Ok(list) if list.len() == pairs.len() => {
                Ok(list.into_iter().map(|r| Some(r.into())).collect())
            }
            _ => Ok(vec![None; pairs.len()]),
        }
    }
}

/// Select a backend from a CLI-style spec: `"heuristic"` or a base URL.
pub fn backend_from_spec(spec: &str) -> Result<Box<dyn NliBackend>> {
    if spec == "heuristic" {
        Ok(Box::new(HeuristicNli))
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(Box::new(RemoteNli::new(spec)?))
    } else {
        Err(Error::Usage(format!(
            "NLI backend must be 'heuristic' or an http(s) URL, got '{spec}'"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heuristic_identical_text_entails() {
        let v = HeuristicNli
            .score(
                "a pedestrian is crossing the road",
                "a pedestrian is crossing the road",
            )
            .unwrap()
            .unwrap();
        assert!(v.entail >= 0.9 - 1e-12);
        assert!((v.entail + v.neutral + v.contra - 1.0).abs() < 1e-9);
    }

    #[test]
    fn heuristic_contradiction_fires() {
        let v = HeuristicNli
            .score(
                "a pedestrian is crossing the road",
                "the ego vehicle should keep going at the same speed",
            )
            .unwrap()
            .unwrap();
        assert!(v.contra >= 0.9);
    }

    #[test]
    fn heuristic_empty_premise_is_neutral() {
        let v = HeuristicNli.score("", "anything at all").unwrap().unwrap();
        assert_eq!(v.contra, 0.0);
        assert_eq!(v.entail, 0.0);
        assert!((v.neutral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_handles_degenerate_input() {
        let v = NliVerdict {
            entail: 0.0,
            neutral: 0.0,
            contra: 0.0,
        }
        .normalized();
        assert!((v.entail - 1.0 / 3.0).abs() < 1e-12);
        let v = NliVerdict {
            entail: 2.0,
            neutral: 1.0,
            contra: 1.0,
        }
        .normalized();
        assert!((v.entail + v.neutral + v.contra - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backend_spec_parsing() {
        assert!(backend_from_spec("heuristic").is_ok());
        assert!(backend_from_spec("http://localhost:9000").is_ok());
        assert!(matches!(
            backend_from_spec("ftp://nope"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn remote_backend_unreachable_is_absent() {
        // nothing listens on this port; must be absent, not an error
        let r = RemoteNli::with_timeout("http://127.0.0.1:1", Duration::from_millis(300)).unwrap();
        assert!(r.score("p", "h").unwrap().is_none());
        let batch = r
            .score_batch(&[("a".into(), "b".into()), ("c".into(), "d".into())])
            .unwrap();
        assert_eq!(batch, vec![None, None]);
    }
}
