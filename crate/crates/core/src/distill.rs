//! Feature distillation losses and the per-stage heads they train.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    cross_attention_fuse, init_cross_attention, init_local_attention, local_self_attention, CrossAttnParams,
    LocalAttnParams,
};
use crate::error::{Error, Result};
use crate::fam::{fam_forward, init_fam, Branches, FamParams};
use crate::ops::mean_squared_error;
use crate::params::NamedParams;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    LayerToLayer,
    Review,
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::LayerToLayer => "layer_to_layer",
            DistillMode::Review => "review",
        })
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_to_layer" => Ok(DistillMode::LayerToLayer),
            "review" => Ok(DistillMode::Review),
            other => Err(Error::Param(format!("unknown distill mode '{other}' (expected layer_to_layer or review)"))),
        }
    }
}

/// Which stages are compared and how strongly.
///
/// `stage_pairs[k] = (teacher stage, student stage)`, ordered shallow to
/// deep. In review mode the pairs are the recursion levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub mode: DistillMode,
    pub stage_pairs: Vec<(usize, usize)>,
    pub alpha: f64,
}

impl DistillPlan {
    pub fn new(mode: DistillMode, teacher_stages: &[usize], student_stages: &[usize], alpha: f64) -> Result<Self> {
        if teacher_stages.len() != student_stages.len() {
            return Err(Error::Plan(format!(
                "teacher selects {} stages but student selects {}; the stage counts must match",
                teacher_stages.len(),
                student_stages.len()
            )));
        }
        if teacher_stages.is_empty() {
            return Err(Error::Plan("at least one stage pair is required".into()));
        }
        check_alpha(alpha)?;
        Ok(Self {
            mode,
            stage_pairs: teacher_stages.iter().copied().zip(student_stages.iter().copied()).collect(),
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.stage_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage_pairs.is_empty()
    }

    /// Checks every index against the models' tap counts.
    pub fn validate(&self, teacher_taps: usize, student_taps: usize) -> Result<()> {
        if teacher_taps != student_taps {
            return Err(Error::Plan(format!(
                "teacher exposes {teacher_taps} stages, student exposes {student_taps}"
            )));
        }
        for &(t, s) in &self.stage_pairs {
            if t >= teacher_taps || s >= student_taps {
                return Err(Error::Plan(format!(
                    "stage pair ({t}, {s}) out of range for {teacher_taps} stages"
                )));
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("alpha must be a finite non-negative number, got {alpha}")))
    }
}

/// Element-mean squared difference.
pub fn l2_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    mean_squared_error(a, b)
}

/// `task + alpha · feat`.
pub fn total_loss(task: f64, feat: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(task + alpha * feat)
}

/// Same objective recorded on a tape.
pub fn total_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, task: Var, feat: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = tape.scale_const(feat, T::from_f64_lossy(alpha))?;
    tape.add(task, weighted)
}

fn check_lists(teacher: usize, student: usize, heads: usize, what: &str) -> Result<()> {
    if teacher != student {
        return Err(Error::Plan(format!("{teacher} teacher features vs {student} student features")));
    }
    if teacher == 0 {
        return Err(Error::Plan("no features to distill".into()));
    }
    if heads != teacher {
        return Err(Error::Plan(format!("{heads} {what} heads for {teacher} stage pairs")));
    }
    Ok(())
}

/// `Σ_k D(T_k, fam_k(la_k(S_k)))`. Teacher features are detached first, so
/// no gradient reaches whatever produced them.
pub fn layer_to_layer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[Var],
    student: &[Var],
    la: &[LocalAttnParams<T>],
    fam: &[FamParams<T>],
) -> Result<Var> {
    check_lists(teacher.len(), student.len(), la.len(), "local attention")?;
    check_lists(teacher.len(), student.len(), fam.len(), "fam")?;
    let mut terms = Vec::with_capacity(teacher.len());
    for k in 0..teacher.len() {
        let target = tape.detach(teacher[k]);
        let attended = local_self_attention(tape, student[k], &la[k], &format!("la.{k}"))?;
        let projected = fam_forward(tape, attended, &fam[k], &format!("fam.{k}"))?;
        terms.push(tape.mse(target, projected)?);
    }
    tape.sum(&terms)
}

/// Review loss with recursive top-down fusion.
///
/// The deepest student map is the initial fused map. Each shallower level
/// `k` fuses `u_k(S_k, fused_{k+1})`, reusing the previous result, and
/// contributes `D(T_k, fam_k(fused_k))`. Terms are summed deepest first.
/// `crossat[k]` serves level `k` for `k < M−1`; its `c_hi` is level `k+1`'s
/// channel count.
pub fn review_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &[Var],
    student: &[Var],
    crossat: &[CrossAttnParams<T>],
    fam: &[FamParams<T>],
) -> Result<Var> {
    check_lists(teacher.len(), student.len(), fam.len(), "fam")?;
    let m = teacher.len();
    if crossat.len() != m - 1 {
        return Err(Error::Plan(format!("{} cross attention heads for {m} levels (need {})", crossat.len(), m - 1)));
    }
    let mut fused = student[m - 1];
    let mut terms = Vec::with_capacity(m);
    for k in (0..m).rev() {
        if k < m - 1 {
            fused = cross_attention_fuse(tape, student[k], fused, &crossat[k], &format!("crossat.{k}"))?;
        }
        let target = tape.detach(teacher[k]);
        let projected = fam_forward(tape, fused, &fam[k], &format!("fam.{k}"))?;
        terms.push(tape.mse(target, projected)?);
    }
    tape.sum(&terms)
}

/// Hyperparameters for the distillation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hpf_fraction: f64,
    pub branches: Branches,
    pub la_window: usize,
    pub crossat_dim: usize,
    pub crossat_scaled: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hpf_fraction: 0.01,
            branches: Branches::default(),
            la_window: 3,
            crossat_dim: 16,
            crossat_scaled: true,
        }
    }
}

/// Student-side trainable modules of one distillation plan. Exactly one of
/// `la` / `crossat` is populated, depending on the mode.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillHeads<T> {
    pub plan: DistillPlan,
    pub fam: Vec<FamParams<T>>,
    pub la: Vec<LocalAttnParams<T>>,
    pub crossat: Vec<CrossAttnParams<T>>,
}

impl<T: Scalar> DistillHeads<T> {
    /// Sizes one head per stage pair from `(C, H, W)` tap shapes.
    pub fn init(
        plan: &DistillPlan,
        teacher_shapes: &[(usize, usize, usize)],
        student_shapes: &[(usize, usize, usize)],
        cfg: &HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        plan.validate(teacher_shapes.len(), student_shapes.len())?;
        let mut fam = Vec::with_capacity(plan.len());
        let mut la = Vec::new();
        let mut crossat = Vec::new();
        let student_of = |k: usize| student_shapes[plan.stage_pairs[k].1];
        for (k, &(t, s)) in plan.stage_pairs.iter().enumerate() {
            let (ct, ht, wt) = teacher_shapes[t];
            let (cs, hs, ws) = student_shapes[s];
            if (ht, wt) != (hs, ws) {
                return Err(Error::Plan(format!(
                    "stage pair ({t}, {s}): teacher map {ht}x{wt} vs student map {hs}x{ws}"
                )));
            }
            let site_seed = seed.wrapping_add(1000 * k as u64);
            let mut f = init_fam::<T>(ct, cs, hs, ws, cfg.hpf_fraction, site_seed)?;
            f.branches = cfg.branches;
            fam.push(f);
            match plan.mode {
                DistillMode::LayerToLayer => la.push(init_local_attention::<T>(cs, cfg.la_window, site_seed + 1)?),
                DistillMode::Review if k + 1 < plan.len() => {
                    let (c_hi, _, _) = student_of(k + 1);
                    crossat.push(init_cross_attention::<T>(cs, c_hi, cfg.crossat_dim, cfg.crossat_scaled, site_seed + 2)?)
                }
                DistillMode::Review => {}
            }
        }
        Ok(Self {
            plan: plan.clone(),
            fam,
            la,
            crossat,
        })
    }

    /// Feature loss over full tap lists; the plan selects which taps pair up.
    pub fn feature_loss(&self, tape: &mut Tape<T>, teacher_taps: &[Var], student_taps: &[Var]) -> Result<Var> {
        self.plan.validate(teacher_taps.len(), student_taps.len())?;
        let teacher: Vec<Var> = self.plan.stage_pairs.iter().map(|&(t, _)| teacher_taps[t]).collect();
        let student: Vec<Var> = self.plan.stage_pairs.iter().map(|&(_, s)| student_taps[s]).collect();
        match self.plan.mode {
            DistillMode::LayerToLayer => layer_to_layer_loss(tape, &teacher, &student, &self.la, &self.fam),
            DistillMode::Review => review_loss(tape, &teacher, &student, &self.crossat, &self.fam),
        }
    }

    /// The map each FAM site receives, in site order: `la_k(S_k)` or the
    /// fused review map. Mirrors the loss functions without the MSE terms.
    pub fn fam_inputs(&self, tape: &mut Tape<T>, student_taps: &[Var]) -> Result<Vec<Var>> {
        let student: Vec<Var> = self
            .plan
            .stage_pairs
            .iter()
            .map(|&(_, s)| {
                student_taps
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Plan(format!("student stage {s} of {} taps", student_taps.len())))
            })
            .collect::<Result<_>>()?;
        let m = student.len();
        match self.plan.mode {
            DistillMode::LayerToLayer => (0..m)
                .map(|k| local_self_attention(tape, student[k], &self.la[k], &format!("la.{k}")))
                .collect(),
            DistillMode::Review => {
                let mut out = vec![student[m - 1]; m];
                for k in (0..m - 1).rev() {
                    out[k] = cross_attention_fuse(tape, student[k], out[k + 1], &self.crossat[k], &format!("crossat.{k}"))?;
                }
                Ok(out)
            }
        }
    }
}

impl<T: Scalar> NamedParams<T> for DistillHeads<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (k, p) in self.la.iter().enumerate() {
            p.visit_params(&mut |n, t| f(&format!("la.{k}.{n}"), t));
        }
        for (k, p) in self.crossat.iter().enumerate() {
            p.visit_params(&mut |n, t| f(&format!("crossat.{k}.{n}"), t));
        }
        for (k, p) in self.fam.iter().enumerate() {
            p.visit_params(&mut |n, t| f(&format!("fam.{k}.{n}"), t));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (k, p) in self.la.iter_mut().enumerate() {
            p.visit_params_mut(&mut |n, t| f(&format!("la.{k}.{n}"), t));
        }
        for (k, p) in self.crossat.iter_mut().enumerate() {
            p.visit_params_mut(&mut |n, t| f(&format!("crossat.{k}.{n}"), t));
        }
        for (k, p) in self.fam.iter_mut().enumerate() {
            p.visit_params_mut(&mut |n, t| f(&format!("fam.{k}.{n}"), t));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_fam(c: usize, h: usize, w: usize) -> FamParams<f64> {
        let mut p = init_fam::<f64>(c, c, h, w, 0.01, 0).unwrap();
        p.branches = Branches {
            global: false,
            local: true,
        };
        let mut lw = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            lw.data_mut()[i * c + i] = 1.0;
        }
        p.local_w = lw;
        p
    }

    #[test]
    fn l2_distance_of_ones_and_threes_is_four() {
        let a = Tensor::<f64>::ones(&[2, 3, 4, 5]);
        let b = Tensor::full(&[2, 3, 4, 5], 3.0);
        assert_eq!(l2_distance(&a, &b).unwrap(), 4.0);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_rules() {
        assert_eq!(total_loss(2.0, 3.0, 1.0).unwrap(), 5.0);
        assert_eq!(total_loss(2.0, 3.0, 0.0).unwrap(), 2.0);
        assert!(matches!(total_loss(1.0, 1.0, -0.5), Err(Error::Param(_))));
    }

    #[test]
    fn plan_rejects_unequal_stage_counts() {
        assert!(matches!(
            DistillPlan::new(DistillMode::Review, &[0, 1, 2], &[0, 1], 1.0),
            Err(Error::Plan(_))
        ));
        assert!(matches!(DistillPlan::new(DistillMode::Review, &[], &[], 1.0), Err(Error::Plan(_))));
        let p = DistillPlan::new(DistillMode::Review, &[0, 3], &[0, 1], 1.0).unwrap();
        assert!(matches!(p.validate(3, 3), Err(Error::Plan(_))));
    }

    #[test]
    fn mode_parses_round_trip() {
        for m in [DistillMode::LayerToLayer, DistillMode::Review] {
            assert_eq!(m.to_string().parse::<DistillMode>().unwrap(), m);
        }
        assert!("abf".parse::<DistillMode>().is_err());
    }

    #[test]
    fn identity_layer_to_layer_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let mut la = init_local_attention::<f64>(2, 1, 0).unwrap();
        la.wv = Tensor::eye(2);
        la.rel = Tensor::zeros(&[1, 2]);
        let mut tape = Tape::new();
        let t = tape.constant(x.clone());
        let s = tape.leaf(x);
        let loss = layer_to_layer_loss(&mut tape, &[t], &[s], &[la], &[identity_fam(2, 4, 4)]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-6);
    }

    #[test]
    fn review_invokes_fusion_m_minus_one_times() {
        let shapes = [(2, 8, 8), (3, 4, 4), (4, 2, 2)];
        let plan = DistillPlan::new(DistillMode::Review, &[0, 1, 2], &[0, 1, 2], 1.0).unwrap();
        let heads = DistillHeads::<f64>::init(&plan, &shapes, &shapes, &HeadConfig { crossat_dim: 4, ..Default::default() }, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let mut taps_t = Vec::new();
        let mut taps_s = Vec::new();
        for &(c, h, w) in &shapes {
            taps_t.push(tape.constant(Tensor::randn(&[2, c, h, w], 1.0, &mut rng)));
            taps_s.push(tape.leaf(Tensor::randn(&[2, c, h, w], 1.0, &mut rng)));
        }
        let loss = heads.feature_loss(&mut tape, &taps_t, &taps_s).unwrap();
        assert_eq!(tape.count(OpKind::CrossAttention), 2);
        assert!(tape.value(loss).data()[0] > 0.0);
    }

    #[test]
    fn fam_inputs_reproduce_feature_loss() {
        let shapes = [(2, 8, 8), (3, 4, 4), (4, 3, 3)];
        for mode in [DistillMode::Review, DistillMode::LayerToLayer] {
            let plan = DistillPlan::new(mode, &[0, 1, 2], &[0, 1, 2], 1.0).unwrap();
            let heads = DistillHeads::<f64>::init(&plan, &shapes, &shapes, &HeadConfig { crossat_dim: 4, ..Default::default() }, 7).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut tape = Tape::new();
            let mut taps_t = Vec::new();
            let mut taps_s = Vec::new();
            for &(c, h, w) in &shapes {
                taps_t.push(tape.constant(Tensor::randn(&[1, c, h, w], 1.0, &mut rng)));
                taps_s.push(tape.constant(Tensor::randn(&[1, c, h, w], 1.0, &mut rng)));
            }
            let lv = heads.feature_loss(&mut tape, &taps_t, &taps_s).unwrap();
            let loss = tape.value(lv).data()[0];
            let mut fresh = Tape::new();
            let s2: Vec<Var> = taps_s.iter().map(|&v| fresh.constant(tape.value(v).clone())).collect();
            let inputs = heads.fam_inputs(&mut fresh, &s2).unwrap();
            let mut expected = 0.0;
            for k in 0..3 {
                let y = crate::fam::fam_apply(fresh.value(inputs[k]), &heads.fam[k]).unwrap();
                expected += l2_distance(tape.value(taps_t[k]), &y).unwrap();
            }
            assert!((loss - expected).abs() <= 1e-12 * expected, "{mode}: {loss} vs {expected}");
        }
    }

    #[test]
    fn review_with_single_level_is_one_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let s = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let fam = init_fam::<f64>(2, 2, 4, 4, 0.01, 1).unwrap();
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let sv = tape.leaf(s.clone());
        let loss = review_loss(&mut tape, &[tv], &[sv], &[], std::slice::from_ref(&fam)).unwrap();
        let expected = l2_distance(&t, &crate::fam::fam_apply(&s, &fam).unwrap()).unwrap();
        assert!((tape.value(loss).data()[0] - expected).abs() <= 1e-12 * expected.abs());
        assert_eq!(tape.count(OpKind::CrossAttention), 0);
    }

    #[test]
    fn heads_reject_spatial_mismatch() {
        let plan = DistillPlan::new(DistillMode::LayerToLayer, &[0], &[1], 1.0).unwrap();
        let shapes = [(2, 8, 8), (3, 4, 4)];
        assert!(matches!(
            DistillHeads::<f32>::init(&plan, &shapes, &shapes, &HeadConfig::default(), 0),
            Err(Error::Plan(_))
        ));
    }
}
