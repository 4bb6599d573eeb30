use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, sigmoid, softplus};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_text: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_text: 1.0,
            lambda_mask: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_text, self.lambda_mask, self.lambda_bce, self.lambda_dice];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` `(n, V)` against `targets` (length `n`).
pub fn text_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(Error::Shape(format!(
            "{n} logit rows for {} target tokens",
            targets.len()
        )));
    }
    let idx = Tensor::new(targets, &Device::Cpu)?.reshape((n, 1))?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct MaskLoss {
    pub bce: Tensor,
    pub dice: Tensor,
    /// `λ_BCE·BCE + λ_Dice·Dice`
    pub total: Tensor,
}

/// Mean pixel-wise logistic cross-entropy, computed stably from logits.
pub fn bce_with_logits(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    // softplus(x) - x·g
    let per_pixel = (softplus(logits)? - (logits * gt)?)?;
    Ok(per_pixel.mean_all()?)
}

/// Soft Dice loss on sigmoid probabilities, averaged over the batch.
/// Inputs are `(B, H, W)` or `(H, W)`.
pub fn dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (p, g) = if logits.rank() == 2 {
        (logits.unsqueeze(0)?, gt.unsqueeze(0)?)
    } else {
        (logits.clone(), gt.clone())
    };
    let b = p.dim(0)?;
    let p = sigmoid(&p)?.reshape((b, ()))?;
    let g = g.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let num = ((inter * 2.0)? + DICE_SMOOTH)?;
    let den = ((p.sum(1)? + g.sum(1)?)? + DICE_SMOOTH)?;
    Ok((1.0 - (num / den)?.mean_all()?)?)
}

pub fn mask_loss(logits: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<MaskLoss> {
    if logits.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            logits.dims(),
            gt.dims()
        )));
    }
    let values = gt.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("ground-truth mask must be binary".into()));
    }
    let gt = gt.to_dtype(logits.dtype())?;
    let bce = bce_with_logits(logits, &gt)?;
    let dice = dice_loss(logits, &gt)?;
    let total = ((&bce * w.lambda_bce)? + (&dice * w.lambda_dice)?)?;
    Ok(MaskLoss { bce, dice, total })
}

pub fn total_loss(l_text: &Tensor, l_mask: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((l_text * w.lambda_text)? + (l_mask * w.lambda_mask)?)?)
}

/// Scalar form of the combined objective.
pub fn total_loss_value(l_text: f64, bce: f64, dice: f64, w: &LossWeights) -> f64 {
    w.lambda_text * l_text + w.lambda_mask * (w.lambda_bce * bce + w.lambda_dice * dice)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn text_loss_extremes() {
        let targets = [2u32, 0, 1];
        let mut confident = vec![-1e3; 9];
        for (i, &c) in targets.iter().enumerate() {
            confident[i * 3 + c as usize] = 1e3;
        }
        assert!(scalar(&text_loss(&t(confident, (3, 3)), &targets).unwrap()) < 1e-12);
        let uniform = text_loss(&t(vec![0.3; 15], (3, 5)), &[0, 4, 2]).unwrap();
        assert!((scalar(&uniform) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn text_loss_matches_scalar_loop() {
        let logits: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.4).collect();
        let targets = [1u32, 5, 0, 3];
        let got = scalar(&text_loss(&t(logits.clone(), (4, 6)), &targets).unwrap());
        let mut want = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = &logits[r * 6..(r + 1) * 6];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[c as usize].exp() / z).ln();
        }
        assert!((got - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn text_loss_rejects_length_mismatch() {
        assert!(text_loss(&t(vec![0.0; 6], (2, 3)), &[0]).is_err());
    }

    #[test]
    fn saturated_prediction_has_near_zero_loss() {
        let g: Vec<f64> = (0..64).map(|i| ((i / 3) % 2) as f64).collect();
        let x: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        let l = mask_loss(&t(x, (8, 8)), &t(g, (8, 8)), &LossWeights::default()).unwrap();
        assert!(scalar(&l.total) < 1e-6, "{}", scalar(&l.total));
    }

    #[test]
    fn zero_logits_closed_form() {
        let g: Vec<f64> = (0..64).map(|i| (i % 2) as f64).collect();
        let sum_g: f64 = g.iter().sum();
        let l = mask_loss(&t(vec![0.0; 64], (8, 8)), &t(g, (8, 8)), &LossWeights::default()).unwrap();
        assert!((scalar(&l.bce) - 2f64.ln()).abs() < 1e-12);
        let dice = 1.0 - (sum_g + 1.0) / (0.5 * 64.0 + sum_g + 1.0);
        assert!((scalar(&l.dice) - dice).abs() < 1e-12);
    }

    #[test]
    fn non_binary_ground_truth_is_rejected() {
        let r = mask_loss(&t(vec![0.0; 4], (2, 2)), &t(vec![0.0, 0.5, 1.0, 0.0], (2, 2)), &LossWeights::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(mask_loss(&t(vec![0.0; 4], (2, 2)), &t(vec![0.0; 6], (2, 3)), &LossWeights::default()).is_err());
    }

    #[test]
    fn combined_objective() {
        let w = LossWeights::default();
        assert!((total_loss_value(0.7, 0.2, 0.1, &w) - 1.15).abs() < 1e-12);
        let zero = LossWeights {
            lambda_text: 0.0,
            lambda_mask: 0.0,
            lambda_bce: 0.0,
            lambda_dice: 0.0,
        };
        assert_eq!(total_loss_value(3.0, 2.0, 1.0, &zero), 0.0);
    }
}
