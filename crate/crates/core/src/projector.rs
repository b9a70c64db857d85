//! Gated context projection: extract the hidden state at τ_k, project it
//! through σ(g)·W·(h/(‖h‖₂+ε)), inject at τ_{k+1}, and log telemetry.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{load_into, state_checksum};
use crate::error::{Error, Result};
use crate::rng::XorShiftRng;
use crate::stage::Transition;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// ε in the normalization denominator, fixed by the mechanism definition.
pub const PROJECTOR_EPS: f64 = 1e-6;
pub const GATE_INIT: f64 = -3.5;
pub const WEIGHT_INIT_SCALE: f64 = 0.01;
pub const PROJECTOR_LR_MULT: f64 = 3.0;
pub const GATE_LR_MULT: f64 = 25.0;

pub struct GatedProjector {
    pub w: Tensor,
    pub g: Tensor,
    pub transition: Transition,
    pub init_seed: u64,
    /// Forces the gate contribution to exactly zero (σ never reaches 0 in
    /// floats); the switch behind the closed-gate equivalence oracle.
    pub hard_zero_gate: bool,
}

impl GatedProjector {
    pub fn new(dim: usize, transition: Transition, seed: u64) -> GatedProjector {
        let mut rng = XorShiftRng::new(seed);
        GatedProjector {
            w: Tensor::param_normal(&[dim, dim], WEIGHT_INIT_SCALE, &mut rng),
            g: Tensor::scalar(GATE_INIT, true),
            transition,
            init_seed: seed,
            hard_zero_gate: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// h̃ = σ(g) · W · (h / (‖h‖₂ + ε)); differentiable w.r.t. W, g, and h.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape() != [self.dim()] {
            return Err(Error::Dimension(format!(
                "project: h shape {:?}, projector dim {}",
                h.shape(),
                self.dim()
            )));
        }
        if self.hard_zero_gate {
            return Ok(Tensor::zeros(&[self.dim()], false));
        }
        let normalized = h.l2_normalize(PROJECTOR_EPS);
        let projected = self.w.matvec(&normalized)?;
        projected.mul_by_scalar_tensor(&self.g.sigmoid())
    }

    pub fn gate_opening(&self) -> f64 {
        if self.hard_zero_gate {
            0.0
        } else {
            1.0 / (1.0 + (-self.g.item()).exp())
        }
    }

    /// Copy W and g bit-exact from `src`; both remain independently trainable.
    pub fn transfer_init(&self, src: &GatedProjector) -> Result<()> {
        if src.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "transfer_init dims {} vs {}",
                src.dim(),
                self.dim()
            )));
        }
        self.w.set_data(src.w.to_vec());
        self.g.set_data(src.g.to_vec());
        Ok(())
    }

    pub fn params_w(&self) -> Vec<Tensor> {
        vec![self.w.clone()]
    }

    pub fn params_g(&self) -> Vec<Tensor> {
        vec![self.g.clone()]
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        vec![
            (format!("projector.{}.w", self.transition), self.w.clone()),
            (format!("projector.{}.g", self.transition), self.g.clone()),
        ]
    }

    pub fn load_state(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        load_into(&self.state(), map)
    }

    pub fn checksum(&self) -> String {
        state_checksum(&self.state())
    }
}

/// hidden[τ] for the sequence's τ. Frozen upstream passes run under
/// `no_grad`, which makes extraction a gradient boundary there.
pub fn extract_context(hidden: &Tensor, seq: &TokenSequence) -> Result<Tensor> {
    let tau = seq.tau()?;
    if tau >= hidden.shape()[0] {
        return Err(Error::Dimension(format!(
            "tau {tau} out of range for hidden with {} rows",
            hidden.shape()[0]
        )));
    }
    hidden.select_row(tau)
}

/// output[τ] = emb[τ] + h̃; every other row bit-identical to the input.
pub fn inject(emb: &Tensor, seq: &TokenSequence, h_tilde: &Tensor) -> Result<Tensor> {
    emb.add_at_row(seq.tau()?, h_tilde)
}

/// ‖h̃‖₂ / ‖emb[τ]‖₂ — relative strength of injected context.
pub fn injection_ratio(h_tilde: &Tensor, emb: &Tensor, seq: &TokenSequence) -> Result<f64> {
    let tau = seq.tau()?;
    let d = emb.shape()[1];
    let row_norm = emb.with_data(|data| {
        data[tau * d..(tau + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    });
    if row_norm == 0.0 {
        return Err(Error::Numeric(
            "injection_ratio: zero-norm embedding row".into(),
        ));
    }
    Ok(h_tilde.norm2() / row_norm)
}

/// One telemetry record per optimizer step and transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: usize,
    pub transition: String,
    pub gate_opening: f64,
    pub injection_ratio: f64,
}

pub struct TelemetryLog {
    out: Box<dyn Write>,
}

impl TelemetryLog {
    pub fn to_file(path: &Path) -> Result<TelemetryLog> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(TelemetryLog {
            out: Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        })
    }

    pub fn record(&mut self, rec: &TelemetryRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a telemetry JSONL file, skipping malformed lines. Returns the
/// records and the count of skipped lines.
pub fn read_telemetry(path: &Path) -> Result<(Vec<TelemetryRecord>, usize)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "telemetry log {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TelemetryRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Largest singular value via power iteration on WᵀW (test oracle for the
/// projector norm bound).
pub fn spectral_norm_estimate(w: &Tensor, iters: usize, seed: u64) -> f64 {
    let sh = w.shape();
    assert_eq!(sh.len(), 2);
    let (m, n) = (sh[0], sh[1]);
    let data = w.to_vec();
    let mut rng = XorShiftRng::new(seed);
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v, 1.0);
    let mut sigma = 0.0;
    for _ in 0..iters {
        // u = W v
        let mut u = vec![0.0; m];
        for i in 0..m {
            u[i] = data[i * n..(i + 1) * n]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        // v = Wᵀ u / ‖Wᵀ u‖
        let mut vt = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                vt[j] += data[i * n + j] * u[i];
            }
        }
        let vn = vt.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..n {
            v[j] = vt[j] / vn;
        }
        sigma = vn / un;
    }
    sigma
}
