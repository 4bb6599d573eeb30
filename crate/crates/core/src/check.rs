//! Self-checks: brute-force oracles for the correlation and center-pivot
//! convolution, and central finite-difference gradient checks. Gradient checks
//! always run in 64-bit.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassRecord;
use crate::decoder::{DecoderConfig, MaskDecoder};
use crate::error::{Error, Result};
use crate::matching::{build_hypercorrelation, cp4d_conv, Cp4dKernel, Cp4dStride, Decoder4d, Encoder4d, VisualPrompt};
use crate::model::{base_vocab, ModelConfig, Pipeline};
use crate::nn::{ParamGroup, ParamStore, Scope};
use crate::semantic::lm::LmConfig;
use crate::semantic::{ImageAdapterConfig, SemanticConfig, SemanticPrompt};
use crate::train::{batch_loss, mask_loss, LossWeights};
use crate::vision::{BackboneConfig, QueryFeatureMap};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const CP4D_TOL_F32: f64 = 1e-5;
pub const CP4D_TOL_F64: f64 = 1e-10;
pub const CORR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckLevel {
    /// Oracles plus loss, 4D-path and decoder gradients.
    Quick,
    /// Additionally checks gradients through every parameter group of a miniature pipeline.
    Full,
}

impl std::str::FromStr for CheckLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(CheckLevel::Quick),
            "full" => Ok(CheckLevel::Full),
            other => Err(Error::Config(format!("unknown check level {other:?}"))),
        }
    }
}

/// Deliberate corruption used to confirm that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negates the support-branch kernel before calling the implementation.
    Cp4dSignFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn summary(&self) -> String {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{} {:<28} {:.3e} (tol {:.0e}) {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.metric,
                    r.tolerance,
                    r.detail
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn result(name: &str, metric: f64, tolerance: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: metric.is_finite() && metric <= tolerance,
        metric,
        tolerance,
        detail,
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(random_vec(rng, n, -1.0, 1.0), shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Dense 4D convolution whose kernel is `k_q` on the slab where the support
/// offset is central, plus `k_s` on the slab where the query offset is central.
/// Shapes: `x` `(B, C, Hq, Wq, Hs, Ws)`, kernels `(O, C, k, k)`; zero padding `k / 2`.
#[allow(clippy::too_many_arguments)]
pub fn dense_cp4d_oracle(
    x: &[f64],
    dims: [usize; 6],
    k_q: &[f64],
    k_s: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: Cp4dStride,
) -> (Vec<f64>, [usize; 6]) {
    let [b, c, hq, wq, hs, ws] = dims;
    let pad = k / 2;
    let out_len = |n: usize, s: usize| (n + 2 * pad - k) / s + 1;
    let (oq_h, oq_w) = (out_len(hq, stride.query), out_len(wq, stride.query));
    let (os_h, os_w) = (out_len(hs, stride.support), out_len(ws, stride.support));
    let centre = pad;
    let weight = |o: usize, ci: usize, a: usize, bb: usize, u: usize, v: usize| -> f64 {
        let mut w = 0.0;
        if u == centre && v == centre {
            w += k_q[((o * c + ci) * k + a) * k + bb];
        }
        if a == centre && bb == centre {
            w += k_s[((o * c + ci) * k + u) * k + v];
        }
        w
    };
    let xi = |bi: usize, ci: usize, i: usize, j: usize, u: usize, v: usize| {
        ((((bi * c + ci) * hq + i) * wq + j) * hs + u) * ws + v
    };
    let shifted = |pos: usize, s: usize, tap: usize, n: usize| -> Option<usize> {
        let p = (pos * s + tap) as isize - pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    };
    let mut out = vec![0.0; b * c_out * oq_h * oq_w * os_h * os_w];
    let mut idx = 0;
    for bi in 0..b {
        for o in 0..c_out {
            for i in 0..oq_h {
                for j in 0..oq_w {
                    for u in 0..os_h {
                        for v in 0..os_w {
                            let mut acc = bias.get(o).copied().unwrap_or(0.0);
                            for ci in 0..c {
                                for a in 0..k {
                                    let Some(ii) = shifted(i, stride.query, a, hq) else { continue };
                                    for bb in 0..k {
                                        let Some(jj) = shifted(j, stride.query, bb, wq) else { continue };
                                        for du in 0..k {
                                            let Some(uu) = shifted(u, stride.support, du, hs) else { continue };
                                            for dv in 0..k {
                                                let Some(vv) = shifted(v, stride.support, dv, ws) else {
                                                    continue;
                                                };
                                                let w = weight(o, ci, a, bb, du, dv);
                                                if w != 0.0 {
                                                    acc += w * x[xi(bi, ci, ii, jj, uu, vv)];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            out[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    (out, [b, c_out, oq_h, oq_w, os_h, os_w])
}

/// Per-position clamped cosine, `(B, Hq, Wq, Hs, Ws)` from `(B, C, H, W)` inputs.
pub fn cosine_oracle(f_q: &[f64], f_s: &[f64], b: usize, c: usize, q_hw: (usize, usize), s_hw: (usize, usize)) -> Vec<f64> {
    let (hq, wq) = q_hw;
    let (hs, ws) = s_hw;
    let mut out = Vec::with_capacity(b * hq * wq * hs * ws);
    for bi in 0..b {
        for i in 0..hq * wq {
            for j in 0..hs * ws {
                let (mut dot, mut nq, mut ns) = (0.0, 0.0, 0.0);
                for ci in 0..c {
                    let q = f_q[(bi * c + ci) * hq * wq + i];
                    let s = f_s[(bi * c + ci) * hs * ws + j];
                    dot += q * s;
                    nq += q * q;
                    ns += s * s;
                }
                out.push((dot / (nq.sqrt() * ns.sqrt() + 1e-8)).max(0.0));
            }
        }
    }
    out
}

/// Runs `trials` random center-pivot convolutions against the dense oracle and
/// returns the largest absolute deviation.
pub fn cp4d_oracle_trials(trials: usize, dtype: DType, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=2);
        let o = rng.random_range(1..=2);
        let k = if rng.random_bool(0.8) { 3 } else { 1 };
        let dims = [
            b,
            c,
            rng.random_range(3..=6),
            rng.random_range(3..=6),
            rng.random_range(3..=6),
            rng.random_range(3..=6),
        ];
        let stride = Cp4dStride {
            query: rng.random_range(1..=2),
            support: rng.random_range(1..=2),
        };
        let n: usize = dims.iter().product();
        let x = random_vec(&mut rng, n, -1.0, 1.0);
        let kq = random_vec(&mut rng, o * c * k * k, -1.0, 1.0);
        let ks = random_vec(&mut rng, o * c * k * k, -1.0, 1.0);
        let bias = random_vec(&mut rng, o, -1.0, 1.0);
        let (want, _) = dense_cp4d_oracle(&x, dims, &kq, &ks, &bias, o, k, stride);
        let dev = Device::Cpu;
        let t = |v: &[f64], shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v.to_vec(), shape, &dev)?.to_dtype(dtype)?)
        };
        let mut k_s = t(&ks, &[o, c, k, k])?;
        if fault == Some(Fault::Cp4dSignFlip) {
            k_s = k_s.neg()?;
        }
        let kernel = Cp4dKernel {
            k_q: t(&kq, &[o, c, k, k])?,
            k_s,
            bias: Some(t(&bias, &[o])?),
        };
        let got = cp4d_conv(&t(&x, &dims)?, &kernel, stride)?;
        worst = worst.max(max_abs_diff(&to_f64(&got)?, &want));
    }
    Ok(worst)
}

/// Largest deviation of `build_hypercorrelation` from the scalar cosine loop on
/// random 4-channel 3×3 features (no mask).
pub fn hypercorrelation_oracle_trials(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (b, c) = (2, 4);
        let fq = random_vec(&mut rng, b * c * 9, -1.0, 1.0);
        let fs = random_vec(&mut rng, b * c * 9, -1.0, 1.0);
        let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (b, c, 3, 3), &Device::Cpu);
        let got = build_hypercorrelation(&t(&fq)?, &t(&fs)?, None)?;
        worst = worst.max(max_abs_diff(&to_f64(&got)?, &cosine_oracle(&fq, &fs, b, c, (3, 3), (3, 3))));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

/// Compares autograd gradients with central differences for a sample of
/// entries of each variable. `loss` must recompute the scalar from the current
/// variable values.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, per_tensor: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss()?.backward()?;
    let (mut diff2, mut an2, mut num2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut checked = 0;
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::InvalidArgument(format!("gradient check needs f64, {name} is {:?}", var.dtype())));
        }
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let original = to_f64(var.as_tensor())?;
        let n = original.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        };
        let shape = var.shape().clone();
        for i in picks {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu)?)?;
                Ok(loss()?.to_scalar::<f64>()?)
            };
            let plus = eval_at(FD_STEP)?;
            let minus = eval_at(-FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            num2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
        var.set(&Tensor::from_vec(original, shape, &Device::Cpu)?)?;
    }
    let denom = an2.sqrt().max(num2.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck {
        checked,
        rel_error,
        max_abs_diff: max_abs,
    })
}

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v, _)| (n.to_string(), v.clone())).collect()
}

/// Mask-loss gradient w.r.t. the logits on an 8×8 random case.
pub fn grad_check_mask_loss(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Var::from_tensor(&(random_tensor(&mut rng, &[8, 8], DType::F64)? * 3.0)?)?;
    let gt: Vec<f64> = (0..64).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    let gt = Tensor::from_vec(gt, (8, 8), &Device::Cpu)?;
    let w = LossWeights::default();
    let vars = vec![("logits".to_string(), logits.clone())];
    check_gradients(&vars, || Ok(mask_loss(logits.as_tensor(), &gt, &w)?.total), 64, seed)
}

/// Encoder and decoder of the matching branch on a `1×1×8×8×8×8` volume.
pub fn grad_check_4d_path(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(DType::F64);
    let (encoder, decoder) = {
        let mut scope = Scope::new(&mut store, &mut rng, ParamGroup::Matching);
        let enc = Encoder4d::new(&mut scope.sub("enc"), 1, &[4, 8, 8], 3, 4)?;
        let dec = Decoder4d::new(&mut scope.sub("dec"), 8, 8, 4)?;
        (enc, dec)
    };
    let x = random_tensor(&mut rng, &[1, 1, 8, 8, 8, 8], DType::F64)?.abs()?;
    let r_dense = random_tensor(&mut rng, &[1, 8, 8, 8], DType::F64)?;
    let r_pooled = random_tensor(&mut rng, &[1, 8], DType::F64)?;
    let loss = || -> Result<Tensor> {
        let vp = decoder.forward(&encoder.forward(&x)?)?;
        Ok(((vp.dense_map * &r_dense)?.sum_all()? + (vp.pooled * &r_pooled)?.sum_all()?)?)
    };
    check_gradients(&store_vars(&store), loss, per_tensor, seed)
}

/// BCE + Dice loss through the mask decoder at 32×32 output (query grid 8×8).
pub fn grad_check_decoder(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(DType::F64);
    let d = 16;
    let decoder = MaskDecoder::new(&mut store, &mut rng, DecoderConfig::default(), d, 8, [8, 4])?;
    let q = QueryFeatureMap {
        features: random_tensor(&mut rng, &[1, 8, 8, 8], DType::F64)?,
        high_res: vec![
            random_tensor(&mut rng, &[1, 8, 16, 16], DType::F64)?,
            random_tensor(&mut rng, &[1, 4, 32, 32], DType::F64)?,
        ],
    };
    let vis = VisualPrompt::from_dense(random_tensor(&mut rng, &[1, d, 8, 8], DType::F64)?)?;
    let sem = SemanticPrompt {
        embedding: random_tensor(&mut rng, &[1, d], DType::F64)?,
    };
    let gt: Vec<f64> = (0..32 * 32)
        .map(|i| f64::from(u8::from((i / 32usize).abs_diff(16).pow(2) + (i % 32).abs_diff(12).pow(2) < 64)))
        .collect();
    let gt = Tensor::from_vec(gt, (1, 32, 32), &Device::Cpu)?;
    let w = LossWeights::default();
    let loss = || -> Result<Tensor> {
        let logits = decoder.forward(&q, Some(&vis), Some(&sem), 32)?;
        Ok(mask_loss(&logits.logits, &gt, &w)?.total)
    };
    check_gradients(&store_vars(&store), loss, per_tensor, seed)
}

/// Small configuration for end-to-end gradient checks: 64×64 input, 8×8 query grid.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        prompt_dim: 16,
        use_semantic: true,
        use_visual: true,
        backbone: BackboneConfig {
            stem_channels: 4,
            stage_channels: vec![8, 8, 8],
            query_stage: 1,
            query_channels: 8,
            groups: 4,
        },
        semantic: SemanticConfig {
            lm: LmConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                max_len: 256,
                mlp_ratio: 2,
            },
            image: ImageAdapterConfig {
                input_size: 16,
                grid: 2,
                channels: 8,
            },
        },
        matching: crate::matching::MatchingConfig {
            hp: 4,
            encoder_channels: vec![4, 4, 8],
            kernel: 3,
            groups: 4,
            mask_support: true,
        },
        decoder: DecoderConfig::default(),
    }
}

/// Total loss through every parameter group of a miniature pipeline; one
/// result per group.
pub fn grad_check_pipeline(seed: u64, per_tensor: usize) -> Result<BTreeMap<ParamGroup, GradCheck>> {
    let synth = crate::data::synth::SynthConfig {
        image_size: 64,
        per_class: 3,
        ..Default::default()
    };
    let dir = std::env::temp_dir().join(format!("promptseg-gradcheck-{}-{seed}", std::process::id()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = crate::data::gen_synthetic_dataset(&synth, &dir, &mut rng)?;
    let records: BTreeMap<u32, ClassRecord> = data.classes.clone();
    let dataset = data.into_dataset()?;
    let fold = crate::data::make_folds(&dataset.meta, 0)?;
    let episodes: Vec<_> = (0..2)
        .map(|_| crate::data::sample_episode(&dataset, &fold, crate::data::Split::Train, 1, &mut rng))
        .collect::<Result<_>>()?;
    let pipeline = Pipeline::new(miniature_config(), base_vocab(&records), seed, DType::F64)?;
    let w = LossWeights::default();
    let loss = || Ok(batch_loss(&pipeline, &episodes, &w)?.total);
    let mut out = BTreeMap::new();
    for group in ParamGroup::ALL {
        let vars: Vec<(String, Var)> = pipeline
            .store()
            .iter()
            .filter(|(_, _, g)| *g == group)
            .map(|(n, v, _)| (n.to_string(), v.clone()))
            .collect();
        if vars.is_empty() {
            continue;
        }
        out.insert(group, check_gradients(&vars, loss, per_tensor, seed)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub level: CheckLevel,
    pub fault: Option<Fault>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            level: CheckLevel::Quick,
            fault: None,
            seed: 0,
        }
    }
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let s = opts.seed;
    let e = cp4d_oracle_trials(50, DType::F32, s, opts.fault)?;
    report.results.push(result("cp4d_dense_oracle_f32", e, CP4D_TOL_F32, "50 trials".into()));
    let e = cp4d_oracle_trials(50, DType::F64, s + 1, opts.fault)?;
    report.results.push(result("cp4d_dense_oracle_f64", e, CP4D_TOL_F64, "50 trials".into()));
    let e = hypercorrelation_oracle_trials(20, s)?;
    report.results.push(result("hypercorrelation_oracle", e, CORR_TOL, "20 trials".into()));
    let g = grad_check_mask_loss(s)?;
    report
        .results
        .push(result("grad_mask_loss", g.rel_error, GRAD_TOL, format!("{} entries", g.checked)));
    let g = grad_check_4d_path(s, 6)?;
    report
        .results
        .push(result("grad_4d_encode_decode", g.rel_error, GRAD_TOL, format!("{} entries", g.checked)));
    let g = grad_check_decoder(s, 4)?;
    report
        .results
        .push(result("grad_decode_mask", g.rel_error, GRAD_TOL, format!("{} entries", g.checked)));
    if opts.level == CheckLevel::Full {
        for (group, g) in grad_check_pipeline(s, 2)? {
            report.results.push(result(
                &format!("grad_pipeline_{group}"),
                g.rel_error,
                GRAD_TOL,
                format!("{} entries", g.checked),
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_with_identity_kernel() {
        let dims = [1, 1, 3, 3, 3, 3];
        let x: Vec<f64> = (0..81).map(|i| i as f64).collect();
        let mut kq = vec![0.0; 9];
        kq[4] = 1.0;
        let (out, shape) = dense_cp4d_oracle(&x, dims, &kq, &[0.0; 9], &[0.0], 1, 3, Cp4dStride::UNIT);
        assert_eq!(shape, dims);
        assert_eq!(out, x);
    }

    #[test]
    fn sign_flip_is_detected() {
        assert!(cp4d_oracle_trials(3, DType::F64, 0, None).unwrap() < CP4D_TOL_F64);
        assert!(cp4d_oracle_trials(3, DType::F64, 0, Some(Fault::Cp4dSignFlip)).unwrap() > 1e-3);
    }
}
