//! Classification and distillation losses.
//!
//! Teacher-side quantities enter every distillation loss as plain tensors, so
//! no gradient can reach the teacher through them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{huber, pairwise_distance, softmax_cross_entropy, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::NetOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdKind {
    /// Temperature-softened KL divergence between output distributions.
    Kl,
    /// Relational distillation on normalized pairwise embedding distances.
    RkdDistance,
    /// Distance term plus the triplet angle term.
    RkdDistanceAngle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub kind: KdKind,
    pub temperature: f64,
    pub weight: f64,
    pub huber_delta: f64,
    pub angle_weight: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            kind: KdKind::Kl,
            temperature: 4.0,
            weight: 1.0,
            huber_delta: 1.0,
            angle_weight: 2.0,
        }
    }
}

impl KdConfig {
    pub fn rkd() -> Self {
        KdConfig {
            kind: KdKind::RkdDistance,
            ..KdConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "KD temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::invalid(format!("KD weight must be >= 0, got {}", self.weight)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid(format!(
                "Huber delta must be > 0, got {}",
                self.huber_delta
            )));
        }
        if !(self.angle_weight >= 0.0) {
            return Err(Error::invalid("angle weight must be >= 0"));
        }
        Ok(())
    }
}

/// Teacher outputs on a batch, used as fixed distillation targets.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub logits: Tensor,
    pub embedding: Tensor,
}

/// `Σ_j [logsumexp(logits_j) - logits_{j, y_j}]` — summed, not averaged.
pub fn cross_entropy_sum(logits: &Var, labels: &[usize]) -> Result<Var> {
    softmax_cross_entropy(logits, labels)
}

fn log_softmax_tensor(x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    Ok(g.constant(x.clone())?.log_softmax()?.value())
}

/// `T² / B · Σ_j KL(softmax(t_j / T) ‖ softmax(s_j / T))`.
pub fn kd_kl(teacher_logits: &Tensor, student_logits: &Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let s = student_logits.shape();
    if s.len() != 2 || teacher_logits.shape() != s.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "kd_kl",
            lhs: teacher_logits.shape().to_vec(),
            rhs: s,
        });
    }
    let g = student_logits.graph();
    let log_p = log_softmax_tensor(&teacher_logits.map(|v| v / temperature))?;
    let p = g.constant(log_p.map(f64::exp))?;
    let log_p = g.constant(log_p)?;
    let log_q = student_logits.scale(1.0 / temperature)?.log_softmax()?;
    p.mul(&log_p.sub(&log_q)?)?
        .sum()?
        .scale(temperature * temperature / s[0] as f64)
}

fn upper_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n < i % n { 1.0 } else { 0.0 })
}

/// Pairwise distances divided by their mean over nonzero `i < j` pairs; all
/// zeros when every distance is zero.
fn normalized_distances(emb: &Var, mask: &Var) -> Result<Var> {
    let d = pairwise_distance(emb)?.mul(mask)?;
    let nonzero = d.value().data().iter().filter(|&&v| v > 0.0).count();
    if nonzero == 0 {
        return emb.graph().constant(Tensor::zeros(&d.shape()));
    }
    let mu = d.sum()?.scale(1.0 / nonzero as f64)?;
    d.div(&mu)
}

fn check_batch(op: &'static str, teacher: &Tensor, student: &Var, min: usize) -> Result<usize> {
    let s = student.shape();
    if teacher.rank() != 2 || s.len() != 2 || teacher.shape()[0] != s[0] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: teacher.shape().to_vec(),
            rhs: s,
        });
    }
    if s[0] < min {
        return Err(Error::invalid(format!(
            "{op} needs a batch of at least {min}, got {}",
            s[0]
        )));
    }
    Ok(s[0])
}

/// Relational distance loss: mean over pairs `i < j` of
/// `Huber_δ(t_ij / μ_t - s_ij / μ_s)`, where `μ` is each side's mean nonzero
/// pairwise distance. Embedding widths may differ between the two sides.
pub fn rkd_distance(teacher_emb: &Tensor, student_emb: &Var, delta: f64) -> Result<Var> {
    let n = check_batch("rkd_distance", teacher_emb, student_emb, 2)?;
    let g = student_emb.graph();
    let mask = g.constant(upper_mask(n))?;
    let t = normalized_distances(&g.constant(teacher_emb.clone())?, &mask)?.detach()?;
    let s = normalized_distances(student_emb, &mask)?;
    let pairs = (n * (n - 1) / 2) as f64;
    huber(&t.sub(&s)?, delta)?.mul(&mask)?.sum()?.scale(1.0 / pairs)
}

/// `cos ∠(x_i - x_j, x_k - x_j)` for every anchor `j`, as `[j, i, k]`.
fn angle_cosines(emb: &Var) -> Result<Var> {
    let s = emb.shape();
    let (n, d) = (s[0], s[1]);
    let diff = emb.reshape(&[1, n, d])?.sub(&emb.reshape(&[n, 1, d])?)?;
    let inv_norm = diff.mul(&diff)?.sum_axes(&[2])?.sqrt()?.safe_recip()?;
    let unit = diff.mul(&inv_norm.reshape(&[n, n, 1])?)?;
    unit.matmul(&unit.transpose()?)
}

fn distinct_triplets(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n, n], |idx| {
        let (j, i, k) = (idx / (n * n), idx / n % n, idx % n);
        if i != j && k != j && i != k {
            1.0
        } else {
            0.0
        }
    })
}

/// Relational angle loss: mean over ordered triplets of distinct indices of
/// `Huber_1` between teacher and student angle cosines.
pub fn rkd_angle(teacher_emb: &Tensor, student_emb: &Var) -> Result<Var> {
    let n = check_batch("rkd_angle", teacher_emb, student_emb, 3)?;
    let g = student_emb.graph();
    let t = angle_cosines(&g.constant(teacher_emb.clone())?)?.detach()?;
    let s = angle_cosines(student_emb)?;
    let mask = g.constant(distinct_triplets(n))?;
    let count = (n * (n - 1) * (n - 2)) as f64;
    huber(&t.sub(&s)?, 1.0)?.mul(&mask)?.sum()?.scale(1.0 / count)
}

/// The distillation term selected by `kd`, unweighted.
pub fn kd_term(student: &NetOutput, teacher: &TeacherTargets, kd: &KdConfig) -> Result<Var> {
    match kd.kind {
        KdKind::Kl => kd_kl(&teacher.logits, &student.logits, kd.temperature),
        KdKind::RkdDistance => rkd_distance(&teacher.embedding, &student.embedding, kd.huber_delta),
        KdKind::RkdDistanceAngle => {
            let dist = rkd_distance(&teacher.embedding, &student.embedding, kd.huber_delta)?;
            let angle = rkd_angle(&teacher.embedding, &student.embedding)?;
            dist.add(&angle.scale(kd.angle_weight)?)
        }
    }
}

/// Student support-set loss: `CE_sum + w · KD`. With `w = 0` this is exactly
/// the plain cross-entropy (the KD term is not even evaluated).
pub fn student_inner_loss(
    student: &NetOutput,
    teacher: &TeacherTargets,
    labels: &[usize],
    kd: &KdConfig,
) -> Result<Var> {
    let rows = student.logits.shape()[0];
    if teacher.logits.shape().first() != Some(&rows) || teacher.embedding.shape().first() != Some(&rows) {
        return Err(Error::ShapeMismatch {
            op: "student_inner_loss",
            lhs: teacher.logits.shape().to_vec(),
            rhs: student.logits.shape(),
        });
    }
    let ce = cross_entropy_sum(&student.logits, labels)?;
    if kd.weight == 0.0 {
        return Ok(ce);
    }
    ce.add(&kd_term(student, teacher, kd)?.scale(kd.weight)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::params::ParamSet;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn val(v: &Var) -> f64 {
        v.value().item().unwrap()
    }

    fn rotate2(x: &Tensor, angle: f64) -> Tensor {
        let (c, s) = (angle.cos(), angle.sin());
        Tensor::from_fn(x.shape(), |i| {
            let (r, col) = (i / 2, i % 2);
            let (a, b) = (x.data()[r * 2], x.data()[r * 2 + 1]);
            if col == 0 {
                c * a - s * b
            } else {
                s * a + c * b
            }
        })
    }

    /// Collinear points at mutual distances {1, 1, 2}.
    fn line_points() -> Tensor {
        t(&[3, 2], &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0])
    }

    /// Equilateral triangle with unit sides.
    fn triangle_points() -> Tensor {
        t(&[3, 2], &[0.0, 0.0, 1.0, 0.0, 0.5, 3f64.sqrt() / 2.0])
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[1, 5])).unwrap();
        assert!((val(&cross_entropy_sum(&uniform, &[3]).unwrap()) - 5f64.ln()).abs() < 1e-12);

        let peaked = g.constant(t(&[1, 3], &[10.0, 0.0, 0.0])).unwrap();
        let expect = (10f64.exp() + 2.0).ln() - 10.0;
        let got = val(&cross_entropy_sum(&peaked, &[0]).unwrap());
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 9.08e-5).abs() < 1e-7);

        let one = g.constant(t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let two = g.constant(t(&[2, 3], &[0.3, -1.2, 2.0, 0.3, -1.2, 2.0])).unwrap();
        let l1 = val(&cross_entropy_sum(&one, &[1]).unwrap());
        let l2 = val(&cross_entropy_sum(&two, &[1, 1]).unwrap());
        assert_eq!(l2, 2.0 * l1);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(cross_entropy_sum(&x, &[0, 3]).is_err());
        assert!(cross_entropy_sum(&x, &[0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let g = Graph::new();
        let logits = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.1, -0.3]);
        let same = g.constant(logits.clone()).unwrap();
        assert_eq!(val(&kd_kl(&logits, &same, 4.0).unwrap()), 0.0);

        let s = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
        let kl = val(&kd_kl(&t(&[1, 2], &[1.0, 0.0]), &s, 1.0).unwrap());
        // p = softmax([1, 0]); KL = p1·1 + p2·(-1).
        let p1 = 1.0 / (1.0 + (-1f64).exp());
        assert!((kl - (2.0 * p1 - 1.0)).abs() < 1e-12);
        assert!((kl - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn kl_is_shift_invariant() {
        let g = Graph::new();
        let teacher = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 0.1, -0.3]);
        let student = t(&[2, 3], &[1.5, 0.0, -2.0, 0.7, 0.2, 0.3]);
        let base = val(&kd_kl(&teacher, &g.constant(student.clone()).unwrap(), 2.0).unwrap());
        let shifted_s = g.constant(student.map(|v| v + 7.5)).unwrap();
        let a = val(&kd_kl(&teacher, &shifted_s, 2.0).unwrap());
        let b = val(&kd_kl(&teacher.map(|v| v - 3.0), &g.constant(student).unwrap(), 2.0).unwrap());
        assert!((a - base).abs() < 1e-12);
        assert!((b - base).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(kd_kl(&Tensor::zeros(&[2, 4]), &s, 1.0).is_err());
        assert!(kd_kl(&Tensor::zeros(&[2, 3]), &s, 0.0).is_err());
    }

    #[test]
    fn rkd_distance_identities() {
        let g = Graph::new();
        let e = t(
            &[4, 3],
            &[0.1, 2.0, -1.0, 0.5, 0.0, 0.3, -1.2, 0.4, 0.9, 2.2, -0.7, 0.0],
        );
        let same = g.constant(e.clone()).unwrap();
        assert_eq!(val(&rkd_distance(&e, &same, 1.0).unwrap()), 0.0);
        let doubled = g.constant(e.map(|v| 2.0 * v)).unwrap();
        assert!(val(&rkd_distance(&e, &doubled, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn rkd_distance_fixture() {
        let g = Graph::new();
        let s = g.constant(triangle_points()).unwrap();
        let loss = val(&rkd_distance(&line_points(), &s, 1.0).unwrap());
        // Brute force over the three pairs: teacher {0.75, 0.75, 1.5}, student {1, 1, 1}.
        let huber = |x: f64| if x.abs() <= 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        let expect = (huber(0.75 - 1.0) * 2.0 + huber(1.5 - 1.0)) / 3.0;
        assert!((expect - 0.0625).abs() < 1e-15);
        assert!((loss - 0.0625).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn rkd_distance_rotation_and_dimension_agnostic() {
        let g = Graph::new();
        let e = t(&[4, 2], &[0.1, 2.0, 0.5, 0.0, -1.2, 0.4, 2.2, -0.7]);
        let rotated = g.constant(rotate2(&e, 0.83).map(|v| v * 3.0)).unwrap();
        assert!(val(&rkd_distance(&e, &rotated, 1.0).unwrap()).abs() < 1e-12);
        // Teacher embeds in 2-D, student in 3-D (zero-padded copy).
        let padded = Tensor::from_fn(&[4, 3], |i| if i % 3 == 2 { 0.0 } else { e.data()[i / 3 * 2 + i % 3] });
        let s = g.constant(padded).unwrap();
        assert!(val(&rkd_distance(&e, &s, 1.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn rkd_degenerate_inputs() {
        let g = Graph::new();
        let collapsed = g.constant(Tensor::ones(&[3, 2])).unwrap();
        // Student distances all map to 0, teacher to {0.75, 0.75, 1.5}.
        let loss = val(&rkd_distance(&line_points(), &collapsed, 1.0).unwrap());
        let expect = (2.0 * 0.5 * 0.75f64.powi(2) + (1.5 - 0.5)) / 3.0;
        assert!((loss - expect).abs() < 1e-12);
        let one = g.constant(Tensor::ones(&[1, 2])).unwrap();
        assert!(rkd_distance(&Tensor::ones(&[1, 2]), &one, 1.0).is_err());
    }

    /// Triple-loop reference for the angle loss.
    fn angle_reference(t: &Tensor, s: &Tensor) -> f64 {
        let n = t.shape()[0];
        let cos = |x: &Tensor, i: usize, j: usize, k: usize| {
            let d = x.shape()[1];
            let row = |r: usize| &x.data()[r * d..(r + 1) * d];
            let a: Vec<f64> = row(i).iter().zip(row(j)).map(|(p, q)| p - q).collect();
            let b: Vec<f64> = row(k).iter().zip(row(j)).map(|(p, q)| p - q).collect();
            let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i == j || k == j || i == k {
                        continue;
                    }
                    let d: f64 = cos(t, i, j, k) - cos(s, i, j, k);
                    total += if d.abs() <= 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn rkd_angle_identities() {
        let g = Graph::new();
        let e = t(&[4, 2], &[0.1, 2.0, 0.5, 0.0, -1.2, 0.4, 2.2, -0.7]);
        assert!(val(&rkd_angle(&e, &g.constant(e.clone()).unwrap()).unwrap()).abs() < 1e-15);
        let rotated = g.constant(rotate2(&e, -1.9)).unwrap();
        assert!(val(&rkd_angle(&e, &rotated).unwrap()).abs() < 1e-12);
        let two = g.constant(Tensor::ones(&[2, 2])).unwrap();
        assert!(rkd_angle(&Tensor::ones(&[2, 2]), &two).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rkd_angle_matches_triple_loop(vals in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let teacher = t(&[4, 3], &vals[..12]);
            let student = t(&[4, 3], &vals[12..]);
            let g = Graph::new();
            let got = val(&rkd_angle(&teacher, &g.constant(student.clone()).unwrap()).unwrap());
            prop_assert!((got - angle_reference(&teacher, &student)).abs() < 1e-12);
        }

        #[test]
        fn losses_are_nonnegative(vals in proptest::collection::vec(-5.0f64..5.0, 24), label in 0usize..4) {
            let g = Graph::new();
            let a = t(&[3, 4], &vals[..12]);
            let b = g.constant(t(&[3, 4], &vals[12..])).unwrap();
            prop_assert!(val(&cross_entropy_sum(&b, &[label, 0, 3]).unwrap()) >= 0.0);
            prop_assert!(val(&kd_kl(&a, &b, 2.5).unwrap()) >= -1e-12);
            prop_assert!(val(&rkd_distance(&a, &b, 1.0).unwrap()) >= 0.0);
        }

        #[test]
        fn rkd_distance_invariant_to_rigid_motion(vals in proptest::collection::vec(-3.0f64..3.0, 10), angle in -3.1f64..3.1, scale in 0.1f64..10.0) {
            let e = t(&[5, 2], &vals);
            let g = Graph::new();
            let moved = rotate2(&e, angle).map(|v| v * scale + 1.5);
            let loss = val(&rkd_distance(&e, &g.constant(moved).unwrap(), 1.0).unwrap());
            prop_assert!(loss.abs() < 1e-10);
        }
    }

    #[test]
    fn constant_rows_give_batch_log_n() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 5], 1.3)).unwrap();
        let l = val(&cross_entropy_sum(&x, &[0, 1, 2, 3]).unwrap());
        assert!((l - 4.0 * 5f64.ln()).abs() < 1e-12);
    }

    fn output(g: &Graph, logits: Tensor, emb: Tensor) -> NetOutput {
        NetOutput {
            logits: g.constant(logits).unwrap(),
            embedding: g.constant(emb).unwrap(),
        }
    }

    #[test]
    fn student_inner_loss_reductions() {
        let g = Graph::new();
        let logits = t(&[3, 2], &[0.2, -0.1, 1.0, 0.3, -0.5, 0.5]);
        let student = output(&g, logits.clone(), triangle_points());
        let labels = [0, 1, 1];
        let ce = val(&cross_entropy_sum(&student.logits, &labels).unwrap());

        let targets = TeacherTargets {
            logits: t(&[3, 2], &[3.0, 0.0, 0.0, 3.0, 1.0, 1.0]),
            embedding: line_points(),
        };
        let zero = KdConfig {
            weight: 0.0,
            ..KdConfig::default()
        };
        assert_eq!(
            val(&student_inner_loss(&student, &targets, &labels, &zero).unwrap()),
            ce
        );

        let matching = TeacherTargets {
            logits,
            embedding: line_points(),
        };
        let kl = KdConfig::default();
        assert_eq!(val(&student_inner_loss(&student, &matching, &labels, &kl).unwrap()), ce);

        let rkd = KdConfig::rkd();
        let got = val(&student_inner_loss(&student, &targets, &labels, &rkd).unwrap());
        assert!((got - (ce + 0.0625)).abs() < 1e-12);

        let short = TeacherTargets {
            logits: Tensor::zeros(&[2, 2]),
            embedding: Tensor::zeros(&[2, 2]),
        };
        assert!(student_inner_loss(&student, &short, &labels, &kl).is_err());
    }

    #[test]
    fn kd_config_validation() {
        assert!(KdConfig::default().validate().is_ok());
        for bad in [
            KdConfig {
                temperature: 0.0,
                ..KdConfig::default()
            },
            KdConfig {
                weight: -1.0,
                ..KdConfig::default()
            },
            KdConfig {
                huber_delta: 0.0,
                ..KdConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn loss_gradients_pass_gradcheck() {
        let teacher_logits = t(
            &[4, 3],
            &[0.3, 1.2, -0.4, 2.0, 0.1, 0.0, -1.0, 0.5, 0.8, 0.2, 0.2, -0.6],
        );
        let teacher_emb = t(
            &[4, 3],
            &[1.0, 0.2, -0.3, 0.0, 1.1, 0.4, -0.8, 0.3, 0.9, 0.5, -1.0, 0.1],
        );
        let p = ParamSet::new(vec![
            (
                "logits".into(),
                t(
                    &[4, 3],
                    &[0.5, -0.2, 0.9, 0.1, 0.7, -1.1, 0.4, 0.0, 1.3, -0.5, 0.6, 0.2],
                ),
            ),
            ("emb".into(), t(&[4, 2], &[0.3, -0.6, 1.2, 0.4, -0.9, 0.8, 0.1, 1.5])),
        ])
        .unwrap();
        let labels = [2, 0, 1, 1];
        for kind in [KdKind::Kl, KdKind::RkdDistance, KdKind::RkdDistanceAngle] {
            let kd = KdConfig {
                kind,
                huber_delta: 0.3,
                ..KdConfig::default()
            };
            let targets = TeacherTargets {
                logits: teacher_logits.clone(),
                embedding: teacher_emb.clone(),
            };
            let report = finite_diff_check(
                |_, v| {
                    let out = NetOutput {
                        logits: v.get("logits")?.clone(),
                        embedding: v.get("emb")?.clone(),
                    };
                    student_inner_loss(&out, &targets, &labels, &kd)
                },
                &p,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{kind:?}: {report:?}");
        }
    }
}
