//! AdamW with parameter groups, the warmup+cosine schedule, and the
//! finite-difference gradient checker.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A set of trainable parameters sharing an LR multiplier and weight decay.
/// Every trainable parameter belongs to exactly one group; frozen parameters
/// belong to none.
#[derive(Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<Tensor>,
    pub lr_multiplier: f64,
    pub weight_decay: f64,
}

impl ParamGroup {
    pub fn new(name: &str, params: Vec<Tensor>) -> Self {
        ParamGroup {
            name: name.to_string(),
            params,
            lr_multiplier: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn with_lr_multiplier(mut self, m: f64) -> Self {
        assert!(m >= 0.0);
        self.lr_multiplier = m;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        assert!(wd >= 0.0);
        self.weight_decay = wd;
        self
    }
}

pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub step_count: u64,
    moments: HashMap<u64, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            betas: (0.9, 0.999),
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam step. Effective LR per group is
    /// `base_lr * schedule_scale * lr_multiplier`.
    pub fn step(
        &mut self,
        groups: &[ParamGroup],
        base_lr: f64,
        schedule_scale: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for group in groups {
            let lr = base_lr * schedule_scale * group.lr_multiplier;
            for p in &group.params {
                let grad = p.grad().ok_or_else(|| {
                    Error::Data(format!(
                        "missing gradient on trainable parameter in group '{}'",
                        group.name
                    ))
                })?;
                let (m, v) = self
                    .moments
                    .entry(p.id())
                    .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
                let mut data = p.to_vec();
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mhat = m[i] / bias1;
                    let vhat = v[i] / bias2;
                    data[i] -= lr * (mhat / (vhat.sqrt() + self.eps))
                        + lr * group.weight_decay * data[i];
                }
                p.set_data(data);
            }
        }
        Ok(())
    }
}

pub fn zero_grads(groups: &[ParamGroup]) {
    for g in groups {
        for p in &g.params {
            p.zero_grad();
        }
    }
}

/// Linear warmup 0→1 over `warmup_frac * total_steps`, then cosine decay 1→0.
pub fn cosine_warmup_scale(step: usize, total_steps: usize, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Data("cosine_warmup_scale: total_steps = 0".into()));
    }
    if !(0.0 < warmup_frac && warmup_frac < 1.0) {
        return Err(Error::Data("warmup_frac must be in (0,1)".into()));
    }
    if step > total_steps {
        return Err(Error::Data(format!(
            "step {step} > total_steps {total_steps}"
        )));
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        Ok(s / warmup)
    } else {
        let progress = (s - warmup) / (total_steps as f64 - warmup);
        Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Central finite differences vs analytic gradients over every coordinate of
/// `params`. Returns the max relative error |a−n| / max(|a|, |n|, 1e-8).
///
/// `f` must be a deterministic scalar function of the parameter values; it is
/// re-evaluated 2×numel times, so keep configurations tiny.
pub fn grad_check(
    f: &mut dyn FnMut() -> Result<Tensor>,
    params: &[Tensor],
    h: f64,
) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (p, a) in params.iter().zip(&analytic) {
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            p.set_data(plus);
            let fp = f()?.item();
            let mut minus = base.clone();
            minus[i] -= h;
            p.set_data(minus);
            let fm = f()?.item();
            p.set_data(base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric("non-finite finite-difference value".into()));
            }
            let rel = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShiftRng;
    use crate::tensor::softmax_cross_entropy;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 3.0], true);
        p.zero_grad();
        // populate a zero gradient explicitly
        let loss = p.scale(0.0).sum();
        loss.backward().unwrap();
        let groups = [ParamGroup::new("g", vec![p.clone()])];
        let mut opt = AdamW::default();
        opt.step(&groups, 0.1, 1.0).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_lr_multiplier_is_noop_on_values() {
        let p = Tensor::new(&[2], vec![0.5, -0.25], true);
        let before = p.to_vec();
        let loss = p.scale(3.0).sum();
        loss.backward().unwrap();
        let groups =
            [ParamGroup::new("g", vec![p.clone()]).with_lr_multiplier(0.0).with_weight_decay(0.05)];
        let mut opt = AdamW::default();
        opt.step(&groups, 0.1, 1.0).unwrap();
        let after = p.to_vec();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.to_bits(), a.to_bits());
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With m̂ = g and v̂ = g², the first update is lr·sign(g)/(1+eps/|g|)≈lr·sign(g).
        let p = Tensor::new(&[1], vec![2.0], true);
        let loss = p.scale(3.0).sum(); // grad = 3
        loss.backward().unwrap();
        let groups = [ParamGroup::new("g", vec![p.clone()])];
        let mut opt = AdamW::default();
        let lr = 0.01;
        opt.step(&groups, lr, 1.0).unwrap();
        let g: f64 = 3.0;
        let expected = 2.0 - lr * (g / (g.abs() + opt.eps));
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_errors() {
        let p = Tensor::new(&[1], vec![1.0], true);
        p.zero_grad();
        let groups = [ParamGroup::new("g", vec![p])];
        let mut opt = AdamW::default();
        assert!(opt.step(&groups, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        let frac = 0.10;
        assert_eq!(cosine_warmup_scale(10, total, frac).unwrap(), 1.0);
        assert!(cosine_warmup_scale(100, total, frac).unwrap().abs() < 1e-12);
        let mid = cosine_warmup_scale(55, total, frac).unwrap();
        assert!((mid - 0.5).abs() < 1e-12, "midpoint {mid}");
        assert_eq!(cosine_warmup_scale(5, total, frac).unwrap(), 0.5);
        assert!(cosine_warmup_scale(0, 0, frac).is_err());
    }

    #[test]
    fn grad_check_sum_of_params() {
        let p = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.0], true);
        let pc = p.clone();
        let mut f = move || Ok(pc.sum());
        let err = grad_check(&mut f, &[p], 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let p = Tensor::new(&[2], vec![1.0, 2.0], true);
        let mut f = move || Ok(Tensor::scalar(5.0, false).scale(1.0));
        let err = grad_check(&mut f, &[p], 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn grad_check_composite_path() {
        // normalize → matmul → sigmoid gate → elementwise → loss
        let mut rng = XorShiftRng::new(11);
        let w = Tensor::param_normal(&[4, 4], 0.3, &mut rng);
        let g = Tensor::scalar(-1.2, true);
        let h = Tensor::param_normal(&[4], 2.0, &mut rng);
        let (wc, gc, hc) = (w.clone(), g.clone(), h.clone());
        let mut f = move || {
            let hn = hc.l2_normalize(1e-6);
            let proj = wc.matvec(&hn)?;
            let gated = proj.mul_by_scalar_tensor(&gc.sigmoid())?;
            Ok(gated.mul(&gated)?.sum())
        };
        let err = grad_check(&mut f, &[w, g, h], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = XorShiftRng::new(21);
        let logits = Tensor::param_normal(&[3, 5], 1.0, &mut rng);
        let lc = logits.clone();
        let mut f = move || softmax_cross_entropy(&lc, &[1, 4, 0], u32::MAX);
        let err = grad_check(&mut f, &[logits], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut rng = XorShiftRng::new(77);
            let p = Tensor::param_normal(&[6], 0.5, &mut rng);
            let groups = [ParamGroup::new("g", vec![p.clone()]).with_weight_decay(0.05)];
            let mut opt = AdamW::default();
            for step in 0..20 {
                p.zero_grad();
                let loss = p.mul(&p).unwrap().sum();
                loss.backward().unwrap();
                let scale = cosine_warmup_scale(step, 20, 0.1).unwrap();
                opt.step(&groups, 0.05, scale).unwrap();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
