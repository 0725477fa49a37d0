//! Repair objective and its exact gradient with respect to `W`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adapter::{gram, gram_of_unit, normalize_rows, AdapterW};
use super::encoder::{TokenEncoder, TokenSequence};
use super::RepairConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scoring::{ClassPrototypes, Label};
use crate::seed;
use crate::stages::{apply_family, Family, FamilySpec, ThetaD, ThetaR};

/// Frozen teacher plus the fixed projection of its patch tokens to the
/// student width.
#[derive(Debug, Clone)]
pub struct TeacherGuide {
    encoder: TokenEncoder,
    /// Row-major `student_dim × teacher_dim`; `None` when widths agree.
    projection: Option<Vec<f64>>,
    out_dim: usize,
}

impl TeacherGuide {
    pub fn new(encoder: TokenEncoder, student_dim: usize, projection_seed: u64) -> Self {
        let td = encoder.dim();
        let projection = (td != student_dim).then(|| {
            let mut rng = seed::rng(projection_seed);
            let scale = 1.0 / libm::sqrt(td as f64);
            (0..student_dim * td)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        });
        Self { encoder, projection, out_dim: student_dim }
    }

    pub fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    /// Teacher patch tokens at the student width, `N × d`.
    pub fn projected_patches(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let t = self.encoder.tokens(img)?;
        Ok(match &self.projection {
            None => t.patches().to_vec(),
            Some(m) => t
                .patches()
                .chunks_exact(t.dim())
                .flat_map(|p| m.chunks_exact(t.dim()).map(move |row| row.iter().zip(p).map(|(a, b)| a * b).sum()))
                .collect(),
        })
    }

    pub fn target_gram(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        gram(&self.projected_patches(img)?, self.out_dim)
    }
}

/// One of the two mild workflow-style views used by the consistency term.
pub fn mild_view(x: &ImageBuffer, seed: u64) -> Result<ImageBuffer> {
    let mut rng = seed::rng(seed);
    let r = ThetaR {
        center_offset: rng.random_range(-0.05..=0.05),
        width_scale: rng.random_range(0.9..=1.1),
        tone: (0.25, 0.5, 0.75),
        gamma: rng.random_range(0.9..=1.1),
        bit_depth: 8,
    };
    let d = ThetaD { resize: rng.random_range(0.9..=1.0), quality: rng.random_range(85..=95) };
    apply_family(x, &FamilySpec::new(Family::RD, None, Some(r), Some(d))?)
}

/// Everything the loss needs from one image; the encoders are frozen, so
/// this is computed once and only `W` varies afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairExample {
    label: Label,
    dim: usize,
    cls: Vec<f64>,
    views: [Vec<f64>; 2],
    patches: Vec<f64>,
    target: Vec<f64>,
}

impl RepairExample {
    pub fn new(
        student: &TokenEncoder,
        teacher: &TeacherGuide,
        x: &ImageBuffer,
        label: Label,
        view_seeds: [u64; 2],
    ) -> Result<Self> {
        let tokens = student.tokens(x)?;
        let view = |s| student.tokens(&mild_view(x, s)?);
        let views = [view(view_seeds[0])?, view(view_seeds[1])?];
        Self::from_parts(label, &tokens, &views, teacher.target_gram(x)?)
    }

    /// Assembles an example from precomputed student tokens and a target Gram.
    pub fn from_parts(label: Label, tokens: &TokenSequence, views: &[TokenSequence; 2], target: Vec<f64>) -> Result<Self> {
        let d = tokens.dim();
        let n = tokens.len() - 1;
        if views.iter().any(|v| v.dim() != d) {
            return Err(Error::mismatch(d, views[0].dim().max(views[1].dim())));
        }
        if target.len() != n * n {
            return Err(Error::mismatch(n * n, target.len()));
        }
        Ok(Self {
            label,
            dim: d,
            cls: tokens.cls().to_vec(),
            views: [views[0].cls().to_vec(), views[1].cls().to_vec()],
            patches: tokens.patches().to_vec(),
            target,
        })
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub cons: f64,
    pub dist: f64,
}

impl LossParts {
    pub fn total(&self, cfg: &RepairConfig) -> f64 {
        self.task + cfg.lambda_cons * self.cons + cfg.lambda_dist * self.dist
    }

    fn add_scaled(&mut self, other: &LossParts, k: f64) {
        self.task += k * other.task;
        self.cons += k * other.cons;
        self.dist += k * other.dist;
    }
}

/// Gradients of each part, each `d × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PartGrads {
    pub task: Vec<f64>,
    pub cons: Vec<f64>,
    pub dist: Vec<f64>,
}

impl PartGrads {
    fn zeros(d: usize) -> Self {
        Self { task: vec![0.0; d * d], cons: vec![0.0; d * d], dist: vec![0.0; d * d] }
    }

    pub fn total(&self, cfg: &RepairConfig) -> Vec<f64> {
        self.task
            .iter()
            .zip(&self.cons)
            .zip(&self.dist)
            .map(|((t, c), d)| t + cfg.lambda_cons * c + cfg.lambda_dist * d)
            .collect()
    }

    fn add_scaled(&mut self, other: &PartGrads, k: f64) {
        for (a, b) in [(&mut self.task, &other.task), (&mut self.cons, &other.cons), (&mut self.dist, &other.dist)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g ⊗ t` accumulated into `out`.
fn add_outer(out: &mut [f64], g: &[f64], t: &[f64], k: f64) {
    let d = t.len();
    for (i, gi) in g.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        row.iter_mut().zip(t).for_each(|(o, tj)| *o += k * gi * tj);
    }
}

/// Adapted, normalized CLS: `z = (t + W t) / ‖t + W t‖`.
struct Head {
    z: Vec<f64>,
    norm: f64,
}

impl Head {
    fn new(w: &AdapterW, cls: &[f64]) -> Result<Self> {
        let c = w.apply_token(cls);
        let norm = libm::sqrt(dot(&c, &c));
        if norm < super::adapter::GRAM_EPS {
            return Err(Error::ZeroVector);
        }
        Ok(Self { z: c.iter().map(|v| v / norm).collect(), norm })
    }

    /// Pulls `∂L/∂z` back to `∂L/∂W`.
    fn backward(&self, dz: &[f64], cls: &[f64], out: &mut [f64]) {
        let zd = dot(&self.z, dz);
        let g: Vec<f64> = dz.iter().zip(&self.z).map(|(d, z)| (d - zd * z) / self.norm).collect();
        add_outer(out, &g, cls, 1.0);
    }
}

fn check(ex: &RepairExample, w: &AdapterW, protos: &ClassPrototypes) -> Result<()> {
    if w.dim() != ex.dim {
        return Err(Error::mismatch(ex.dim, w.dim()));
    }
    if protos.dim() != ex.dim {
        return Err(Error::mismatch(ex.dim, protos.dim()));
    }
    Ok(())
}

/// Loss parts, and their gradients when `want_grad`.
pub fn evaluate(
    ex: &RepairExample,
    w: &AdapterW,
    protos: &ClassPrototypes,
    cfg: &RepairConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<PartGrads>)> {
    check(ex, w, protos)?;
    let d = ex.dim;
    let mut grads = want_grad.then(|| PartGrads::zeros(d));

    // Task: cross-entropy over temperature-scaled cosine logits.
    let head = Head::new(w, &ex.cls)?;
    let s = cfg.temperature;
    let logits = [s * dot(&head.z, protos.unit[0].as_slice()), s * dot(&head.z, protos.unit[1].as_slice())];
    let y = ex.label.index();
    // Binary cross-entropy is softplus of the logit gap; kept in that form so
    // confident samples do not lose precision to cancellation.
    let gap = logits[1 - y] - logits[y];
    let task = if gap > 0.0 { gap + libm::log1p(libm::exp(-gap)) } else { libm::log1p(libm::exp(gap)) };
    if let Some(g) = grads.as_mut() {
        // ∂/∂z = s σ(gap) (u_other − u_y).
        let sig = if gap > 0.0 { 1.0 / (1.0 + libm::exp(-gap)) } else { libm::exp(gap) / (1.0 + libm::exp(gap)) };
        let coef = s * sig;
        let dz: Vec<f64> = protos.unit[1 - y]
            .as_slice()
            .iter()
            .zip(protos.unit[y].as_slice())
            .map(|(o, t)| coef * (o - t))
            .collect();
        head.backward(&dz, &ex.cls, &mut g.task);
    }

    // Consistency of the adapted margin across the two views.
    let v: Vec<f64> = protos.raw[1].iter().zip(&protos.raw[0]).map(|(a, b)| a - b).collect();
    let h1 = Head::new(w, &ex.views[0])?;
    let h2 = Head::new(w, &ex.views[1])?;
    let diff = dot(&h1.z, &v) - dot(&h2.z, &v);
    let cons = diff * diff;
    if let Some(g) = grads.as_mut() {
        let dz: Vec<f64> = v.iter().map(|vi| 2.0 * diff * vi).collect();
        h1.backward(&dz, &ex.views[0], &mut g.cons);
        let neg: Vec<f64> = dz.iter().map(|x| -x).collect();
        h2.backward(&neg, &ex.views[1], &mut g.cons);
    }

    // Gram alignment of adapted patch tokens with the teacher target.
    let n = ex.patches.len() / d;
    let mut q: Vec<f64> = ex.patches.chunks_exact(d).flat_map(|p| w.apply_token(p)).collect();
    let norms = normalize_rows(&mut q, d)?;
    let mut e = gram_of_unit(&q, d);
    e.iter_mut().zip(&ex.target).for_each(|(g, t)| *g -= t);
    let dist = e.iter().map(|v| v * v).sum();
    if let Some(g) = grads.as_mut() {
        for i in 0..n {
            let mut dq = vec![0.0; d];
            for j in 0..n {
                let k = 4.0 * e[i * n + j];
                dq.iter_mut().zip(&q[j * d..(j + 1) * d]).for_each(|(o, qj)| *o += k * qj);
            }
            let qi = &q[i * d..(i + 1) * d];
            let qd = dot(qi, &dq);
            let gi: Vec<f64> = dq.iter().zip(qi).map(|(a, b)| (a - qd * b) / norms[i]).collect();
            add_outer(&mut g.dist, &gi, &ex.patches[i * d..(i + 1) * d], 1.0);
        }
    }
    Ok((LossParts { task, cons, dist }, grads))
}

/// Loss parts for one example; the total is [`LossParts::total`].
pub fn repair_loss(ex: &RepairExample, w: &AdapterW, protos: &ClassPrototypes, cfg: &RepairConfig) -> Result<LossParts> {
    Ok(evaluate(ex, w, protos, cfg, false)?.0)
}

/// Exact gradient of each loss part with respect to `W`.
pub fn repair_grad(ex: &RepairExample, w: &AdapterW, protos: &ClassPrototypes, cfg: &RepairConfig) -> Result<PartGrads> {
    Ok(evaluate(ex, w, protos, cfg, true)?.1.expect("gradients were requested"))
}

/// Mean loss (and gradient) over a batch, reduced in example order.
pub fn batch_evaluate(
    examples: &[RepairExample],
    w: &AdapterW,
    protos: &ClassPrototypes,
    cfg: &RepairConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<PartGrads>)> {
    if examples.is_empty() {
        return Err(Error::param("repair batch is empty"));
    }
    let k = 1.0 / examples.len() as f64;
    let mut parts = LossParts::default();
    let mut grads = want_grad.then(|| PartGrads::zeros(w.dim()));
    for ex in examples {
        let (p, g) = evaluate(ex, w, protos, cfg, want_grad)?;
        parts.add_scaled(&p, k);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_scaled(&g, k);
        }
    }
    Ok((parts, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repair::encoder::{teacher_encoder, STUDENT_DIM};
    use crate::repair::StudentScorer;
    use crate::scoring::{gen_phantoms, Modality};

    struct Fixture {
        examples: Vec<RepairExample>,
        protos: ClassPrototypes,
    }

    fn fixture() -> Fixture {
        let scorer = StudentScorer::frozen(1);
        let student = scorer.encoder();
        let guide = TeacherGuide::new(teacher_encoder(2), STUDENT_DIM, 3);
        let protos = scorer.prototypes(Modality::MriLike).unwrap();
        let examples = gen_phantoms(4, 9, Modality::MriLike)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, p)| RepairExample::new(student, &guide, &p.image, p.label, [i as u64, 100 + i as u64]).unwrap())
            .collect();
        Fixture { examples, protos }
    }

    fn random_w(seed: u64, scale: f64) -> AdapterW {
        let mut rng = seed::rng(seed);
        AdapterW::from_vec(STUDENT_DIM, (0..STUDENT_DIM * STUDENT_DIM).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fx = fixture();
        let cfg = RepairConfig::default();
        let h = 1e-5;
        for (k, ex) in fx.examples.iter().enumerate() {
            let w = random_w(k as u64, 0.05);
            let g = repair_grad(ex, &w, &fx.protos, &cfg).unwrap();
            let mut rng = seed::rng(40 + k as u64);
            for _ in 0..20 {
                let idx = rng.random_range(0..w.dim() * w.dim());
                let shifted = |delta: f64| {
                    let mut w2 = w.clone();
                    w2.as_mut_slice()[idx] += delta;
                    repair_loss(ex, &w2, &fx.protos, &cfg).unwrap()
                };
                let (up, down) = (shifted(h), shifted(-h));
                for (name, fd, an) in [
                    ("task", (up.task - down.task) / (2.0 * h), g.task[idx]),
                    ("cons", (up.cons - down.cons) / (2.0 * h), g.cons[idx]),
                    ("dist", (up.dist - down.dist) / (2.0 * h), g.dist[idx]),
                ] {
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "{name}[{idx}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_weights_leave_the_task_part() {
        let fx = fixture();
        let cfg = RepairConfig { lambda_cons: 0.0, lambda_dist: 0.0, ..RepairConfig::default() };
        let w = random_w(7, 0.05);
        let parts = repair_loss(&fx.examples[1], &w, &fx.protos, &cfg).unwrap();
        assert_eq!(parts.total(&cfg), parts.task);
        let g = repair_grad(&fx.examples[1], &w, &fx.protos, &cfg).unwrap();
        assert_eq!(g.total(&cfg), g.task);
    }

    #[test]
    fn identical_views_and_matched_grams_vanish() {
        let scorer = StudentScorer::frozen(1);
        let student = scorer.encoder();
        let img = &gen_phantoms(2, 9, Modality::CtLike).unwrap()[1].image;
        let t = student.tokens(img).unwrap();
        let v = student.tokens(&mild_view(img, 5).unwrap()).unwrap();
        let target = gram(t.patches(), t.dim()).unwrap();
        let ex = RepairExample::from_parts(Label::Positive, &t, &[v.clone(), v], target).unwrap();
        let protos = scorer.prototypes(Modality::CtLike).unwrap();
        let cfg = RepairConfig::default();
        let w = AdapterW::zeros(t.dim());
        let parts = repair_loss(&ex, &w, &protos, &cfg).unwrap();
        assert_eq!(parts.cons, 0.0);
        assert!(parts.dist < 1e-20);
        let g = repair_grad(&ex, &w, &protos, &cfg).unwrap();
        assert!(g.dist.iter().chain(&g.cons).all(|v| v.abs() < 1e-9));
    }
}
