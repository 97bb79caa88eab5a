use crate::autograd::{Graph, Var};
use crate::codec_networks::FeatureTap;
use crate::entropy_engine::ChannelEntropyRanking;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::msssim::ms_ssim_var;
use super::weights::{Distortion, FEDSWeights};

/// Scalar value of every loss term of one step, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub d: f64,
    pub r_y: f64,
    pub r_z: f64,
    pub l_out: f64,
    pub l_feat: f64,
    pub l_lat: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `α·L_out + β·L_feat + γ·L_lat`.
    pub fn l_kd(&self, w: &FEDSWeights) -> f64 {
        w.alpha * self.l_out + w.beta * self.l_feat + w.gamma * self.l_lat
    }

    pub fn is_finite(&self) -> bool {
        [self.d, self.r_y, self.r_z, self.l_out, self.l_feat, self.l_lat, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_same<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Distortion between original and reconstruction: MSE, or `1 − MS-SSIM`.
pub fn distortion<T: Scalar>(g: &Graph<T>, x: &Var<T>, x_hat: &Var<T>, kind: Distortion) -> Result<Var<T>> {
    check_same(x, x_hat, "distortion")?;
    match kind {
        Distortion::Mse => Ok(g.mse(x, x_hat)),
        Distortion::MsSsim => {
            let m = ms_ssim_var(g, x, x_hat)?;
            Ok(g.add_scalar(&g.mul_scalar(&m, -T::one()), T::one()))
        }
    }
}

fn check_rates<T: Scalar>(r_y: &Var<T>, r_z: &Var<T>) -> Result<()> {
    for (name, r) in [("R_y", r_y), ("R_z", r_z)] {
        let v = r.item();
        if v < T::zero() {
            return Err(Error::Invalid(format!("{name} is negative ({v})")));
        }
    }
    Ok(())
}

/// `D(x, x̂) + λ(R_y + R_z)`, rates in bits per pixel.
pub fn teacher_loss<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    x_hat: &Var<T>,
    r_y: &Var<T>,
    r_z: &Var<T>,
    w: &FEDSWeights,
) -> Result<Var<T>> {
    check_rates(r_y, r_z)?;
    let d = distortion(g, x, x_hat, w.distortion)?;
    Ok(g.add(&d, &g.mul_scalar(&g.add(r_y, r_z), T::lit(w.lambda))))
}

/// MSE between teacher and student reconstructions.
pub fn output_loss<T: Scalar>(g: &Graph<T>, x_hat_t: &Var<T>, x_hat_s: &Var<T>) -> Result<Var<T>> {
    check_same(x_hat_t, x_hat_s, "output loss")?;
    Ok(g.mse(x_hat_t, x_hat_s))
}

/// Mean over tap pairs of the per-pair MSE.
pub fn feature_loss<T: Scalar>(g: &Graph<T>, taps_t: &[FeatureTap<T>], taps_s: &[FeatureTap<T>]) -> Result<Var<T>> {
    if taps_t.len() != taps_s.len() || taps_t.is_empty() {
        return Err(Error::Shape(format!(
            "feature loss needs equal nonzero tap counts, got {} and {}",
            taps_t.len(),
            taps_s.len()
        )));
    }
    let mut acc: Option<Var<T>> = None;
    for (t, s) in taps_t.iter().zip(taps_s) {
        check_same(&t.values, &s.values, &format!("feature tap {}", t.stage_index))?;
        let m = g.mse(&t.values, &s.values);
        acc = Some(match acc {
            Some(a) => g.add(&a, &m),
            None => m,
        });
    }
    let n = T::lit(taps_t.len() as f64);
    Ok(g.mul_scalar(&acc.expect("nonempty"), T::one() / n))
}

/// The `c_s` highest-entropy teacher channels, in ranking order.
pub fn select_teacher_channels<T: Scalar>(
    g: &Graph<T>,
    y_hat_t: &Var<T>,
    ranking: &ChannelEntropyRanking,
    c_s: usize,
) -> Result<Var<T>> {
    let c_t = y_hat_t.shape()[1];
    if ranking.order.len() != c_t {
        return Err(Error::Shape(format!(
            "ranking covers {} channels, latent has {c_t}",
            ranking.order.len()
        )));
    }
    if c_s == 0 || c_s > c_t {
        return Err(Error::Invalid(format!("cannot select {c_s} of {c_t} teacher channels")));
    }
    Ok(g.gather_channels(y_hat_t, &ranking.order[..c_s]))
}

/// MSE between the selected teacher channels and the student latent
/// (student channel k against the k-th ranked teacher channel).
pub fn latent_loss<T: Scalar>(g: &Graph<T>, y_hat_t_selected: &Var<T>, y_hat_s: &Var<T>) -> Result<Var<T>> {
    check_same(y_hat_t_selected, y_hat_s, "latent loss")?;
    Ok(g.mse(y_hat_t_selected, y_hat_s))
}

/// Teacher-side outputs of a distillation batch. Values are graph constants,
/// so no gradient reaches the teacher.
pub struct TeacherOutputs<T> {
    pub x_hat: Var<T>,
    pub y_hat: Var<T>,
    pub taps: Vec<FeatureTap<T>>,
    pub ranking: ChannelEntropyRanking,
}

pub struct StudentOutputs<T> {
    pub x_hat: Var<T>,
    pub y_hat: Var<T>,
    pub taps: Vec<FeatureTap<T>>,
    pub r_y: Var<T>,
    pub r_z: Var<T>,
}

pub struct DistillationBatchOutputs<T> {
    pub teacher: TeacherOutputs<T>,
    pub student: StudentOutputs<T>,
}

/// `D(x, x̂ˢ) + λ(R_y + R_z) + α·L_out + β·L_feat + γ·L_lat` and its breakdown.
pub fn student_total_loss<T: Scalar>(
    g: &Graph<T>,
    batch: &DistillationBatchOutputs<T>,
    x: &Var<T>,
    w: &FEDSWeights,
) -> Result<(Var<T>, LossBreakdown)> {
    let s = &batch.student;
    let t = &batch.teacher;
    check_rates(&s.r_y, &s.r_z)?;
    let d = distortion(g, x, &s.x_hat, w.distortion)?;
    let l_out = output_loss(g, &t.x_hat, &s.x_hat)?;
    let l_feat = feature_loss(g, &t.taps, &s.taps)?;
    let selected = select_teacher_channels(g, &t.y_hat, &t.ranking, s.y_hat.shape()[1])?;
    let l_lat = latent_loss(g, &selected, &s.y_hat)?;

    let rate = g.mul_scalar(&g.add(&s.r_y, &s.r_z), T::lit(w.lambda));
    let kd = g.add(
        &g.add(&g.mul_scalar(&l_out, T::lit(w.alpha)), &g.mul_scalar(&l_feat, T::lit(w.beta))),
        &g.mul_scalar(&l_lat, T::lit(w.gamma)),
    );
    let total = g.add(&g.add(&d, &rate), &kd);
    let breakdown = LossBreakdown {
        d: d.item().as_f64(),
        r_y: s.r_y.item().as_f64(),
        r_z: s.r_z.item().as_f64(),
        l_out: l_out.item().as_f64(),
        l_feat: l_feat.item().as_f64(),
        l_lat: l_lat.item().as_f64(),
        total: total.item().as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn c(g: &Graph<f64>, shape: &[usize], v: Vec<f64>) -> Var<f64> {
        g.constant(Tensor::from_vec(shape, v).unwrap())
    }

    fn s(g: &Graph<f64>, v: f64) -> Var<f64> {
        g.constant(Tensor::scalar(v))
    }

    fn tap(g: &Graph<f64>, i: usize, v: Vec<f64>) -> FeatureTap<f64> {
        let n = v.len();
        FeatureTap {
            stage_index: i,
            values: c(g, &[1, 1, 1, n], v),
        }
    }

    #[test]
    fn teacher_loss_examples() {
        let g = Graph::inference();
        let w = FEDSWeights::preset(3).unwrap();
        let x = c(&g, &[1, 1, 1, 2], vec![0.2, 0.4]);
        let zero = teacher_loss(&g, &x, &x, &s(&g, 0.0), &s(&g, 0.0), &w).unwrap();
        assert_eq!(zero.item(), 0.0);
        // MSE 0.01 from a uniform 0.1 gap.
        let xh = c(&g, &[1, 1, 1, 2], vec![0.3, 0.5]);
        let l = teacher_loss(&g, &x, &xh, &s(&g, 0.75), &s(&g, 0.25), &w).unwrap();
        assert!((l.item() - 0.025).abs() < 1e-15);
        let l = teacher_loss(&g, &x, &x, &s(&g, 0.6), &s(&g, 0.4), &w).unwrap();
        assert_eq!(l.item(), 0.015 * (0.6 + 0.4));
        assert!(teacher_loss(&g, &x, &x, &s(&g, -0.1), &s(&g, 0.0), &w).is_err());
    }

    #[test]
    fn output_loss_examples() {
        let g = Graph::inference();
        let a = c(&g, &[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let b = c(&g, &[1, 1, 2, 2], vec![0.2, 0.3, 0.4, 0.5]);
        assert_eq!(output_loss(&g, &a, &a).unwrap().item(), 0.0);
        assert!((output_loss(&g, &a, &b).unwrap().item() - 0.01).abs() < 1e-15);
        assert_eq!(output_loss(&g, &a, &b).unwrap().item(), output_loss(&g, &b, &a).unwrap().item());
        let bad = c(&g, &[1, 1, 1, 4], vec![0.0; 4]);
        assert!(output_loss(&g, &a, &bad).is_err());
    }

    #[test]
    fn feature_loss_examples() {
        let g = Graph::inference();
        let t = vec![tap(&g, 1, vec![0.0]), tap(&g, 2, vec![0.0, 0.0])];
        let st = vec![tap(&g, 1, vec![1.0]), tap(&g, 2, vec![3f64.sqrt(), -(3f64.sqrt())])];
        assert!((feature_loss(&g, &t, &st).unwrap().item() - 2.0).abs() < 1e-12);
        assert_eq!(feature_loss(&g, &t, &t).unwrap().item(), 0.0);
        let one = feature_loss(&g, &[tap(&g, 1, vec![5.0])], &[tap(&g, 1, vec![3.0])]).unwrap();
        assert_eq!(one.item(), 4.0);
        assert!(feature_loss(&g, &t[..1], &st).is_err());
        assert!(feature_loss(&g, &[tap(&g, 1, vec![0.0])], &[tap(&g, 1, vec![0.0, 1.0])]).is_err());
    }

    #[test]
    fn channel_selection() {
        let g = Graph::inference();
        let y = c(&g, &[1, 3, 1, 1], vec![10.0, 11.0, 12.0]);
        let r = ChannelEntropyRanking::from_mean_entropy(vec![3.0, 1.0, 2.0]);
        let sel = select_teacher_channels(&g, &y, &r, 2).unwrap();
        assert_eq!(sel.value().data(), &[10.0, 12.0]);
        assert_eq!(sel.shape(), &[1, 2, 1, 1]);
        assert!(select_teacher_channels(&g, &y, &r, 4).is_err());
    }

    #[test]
    fn latent_loss_quadratic() {
        let g = Graph::inference();
        let a = c(&g, &[1, 2, 1, 1], vec![0.0, 0.0]);
        let b = c(&g, &[1, 2, 1, 1], vec![0.5, 0.5]);
        let b2 = c(&g, &[1, 2, 1, 1], vec![1.0, 1.0]);
        let l1 = latent_loss(&g, &a, &b).unwrap().item();
        let l2 = latent_loss(&g, &a, &b2).unwrap().item();
        assert_eq!(l2, 4.0 * l1);
        assert!(latent_loss(&g, &a, &c(&g, &[1, 2, 2, 1], vec![0.0; 4])).is_err());
    }

    #[test]
    fn kd_weighting() {
        let w = FEDSWeights::default();
        let b = LossBreakdown {
            l_out: 0.1,
            l_feat: 0.2,
            l_lat: 0.4,
            ..Default::default()
        };
        assert!((b.l_kd(&w) - 0.4).abs() < 1e-15);
    }
}
