use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Action, GrpoConfig, GrpoError, RolloutGroup};
use crate::dataset::Instance;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `KL(softmax(p) || softmax(q))` from logits.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

/// Gradient of `KL(softmax(z) || softmax(q))` with respect to `z`.
fn kl_gradient(z: &[f64], q: &[f64]) -> Vec<f64> {
    let lp = log_softmax(z);
    let lq = log_softmax(q);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b - kl)).collect()
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Tabular softmax policy with a frozen reference copy for the KL penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub instance_ids: Vec<String>,
    pub logits: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    /// Per-instance logits over template families, when the template head is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_logits: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_reference: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ToyPolicy {
    /// Uniform policy over each instance's options; `template_families > 0`
    /// enables the template head.
    pub fn uniform(instances: &[Instance], template_families: usize) -> Self {
        let logits: Vec<Vec<f64>> = instances.iter().map(|i| vec![0.0; i.options.len()]).collect();
        let template = (template_families > 0).then(|| vec![vec![0.0; template_families]; instances.len()]);
        let mut p = Self {
            instance_ids: instances.iter().map(|i| i.id.clone()).collect(),
            reference: logits.clone(),
            logits,
            template_reference: template.clone(),
            template_logits: template,
            index: HashMap::new(),
        };
        p.reindex();
        p
    }

    /// Rebuilds the id lookup; call after deserializing.
    pub fn reindex(&mut self) {
        self.index = self.instance_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    }

    pub fn position(&self, instance_id: &str) -> Result<usize, GrpoError> {
        match self.index.get(instance_id) {
            Some(&i) => Ok(i),
            None => self
                .instance_ids
                .iter()
                .position(|id| id == instance_id)
                .ok_or_else(|| GrpoError::UnknownInstance(instance_id.to_string())),
        }
    }

    pub fn probs(&self, idx: usize) -> Vec<f64> {
        softmax(&self.logits[idx])
    }

    pub fn template_probs(&self, idx: usize) -> Option<Vec<f64>> {
        self.template_logits.as_ref().map(|t| softmax(&t[idx]))
    }

    pub fn greedy_label(&self, idx: usize) -> usize {
        let z = &self.logits[idx];
        (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best })
    }

    pub fn sample_action<R: Rng>(&self, idx: usize, rng: &mut R) -> Action {
        let label_index = sample_index(&self.probs(idx), rng);
        let template = self.template_probs(idx).map(|p| sample_index(&p, rng));
        Action { label_index, template }
    }

    /// KL to the reference for one instance, label and template heads summed.
    pub fn kl(&self, idx: usize) -> f64 {
        let mut kl = kl_divergence(&self.logits[idx], &self.reference[idx]);
        if let (Some(t), Some(r)) = (&self.template_logits, &self.template_reference) {
            kl += kl_divergence(&t[idx], &r[idx]);
        }
        kl
    }

    pub fn mean_kl(&self) -> f64 {
        if self.logits.is_empty() {
            return 0.0;
        }
        (0..self.logits.len()).map(|i| self.kl(i)).sum::<f64>() / self.logits.len() as f64
    }

    /// Objective maximized by [`ToyPolicy::update`]:
    ///
    /// ```text
    /// J = sum over groups g of [ mean_k A_gk * log pi(action_gk) - kl_coeff * KL_g ]
    /// ```
    pub fn objective(&self, groups: &[RolloutGroup], kl_coeff: f64) -> Result<f64, GrpoError> {
        let mut j = 0.0;
        for g in groups {
            let idx = self.position(&g.instance_id)?;
            let lp = log_softmax(&self.logits[idx]);
            let lt = self.template_logits.as_ref().map(|t| log_softmax(&t[idx]));
            let k = g.actions.len().max(1) as f64;
            for (a, adv) in g.actions.iter().zip(&g.advantages) {
                j += adv * lp[a.label_index] / k;
                if let (Some(lt), Some(t)) = (&lt, a.template) {
                    j += adv * lt[t] / k;
                }
            }
            j -= kl_coeff * self.kl(idx);
        }
        Ok(j)
    }

    /// Analytic gradient of [`ToyPolicy::objective`] as (label logits, template logits).
    pub fn gradient(
        &self,
        groups: &[RolloutGroup],
        kl_coeff: f64,
    ) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>), GrpoError> {
        let mut g_label: Vec<Vec<f64>> = self.logits.iter().map(|z| vec![0.0; z.len()]).collect();
        let mut g_tmpl: Option<Vec<Vec<f64>>> =
            self.template_logits.as_ref().map(|t| t.iter().map(|z| vec![0.0; z.len()]).collect());
        for g in groups {
            let idx = self.position(&g.instance_id)?;
            let p = self.probs(idx);
            let pt = self.template_probs(idx);
            let k = g.actions.len().max(1) as f64;
            for (a, adv) in g.actions.iter().zip(&g.advantages) {
                for (j, pj) in p.iter().enumerate() {
                    let indicator = if j == a.label_index { 1.0 } else { 0.0 };
                    g_label[idx][j] += adv * (indicator - pj) / k;
                }
                if let (Some(pt), Some(t), Some(gt)) = (&pt, a.template, g_tmpl.as_mut()) {
                    for (j, pj) in pt.iter().enumerate() {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        gt[idx][j] += adv * (indicator - pj) / k;
                    }
                }
            }
            if kl_coeff > 0.0 {
                for (j, d) in kl_gradient(&self.logits[idx], &self.reference[idx]).into_iter().enumerate() {
                    g_label[idx][j] -= kl_coeff * d;
                }
                if let (Some(t), Some(r), Some(gt)) = (&self.template_logits, &self.template_reference, g_tmpl.as_mut()) {
                    for (j, d) in kl_gradient(&t[idx], &r[idx]).into_iter().enumerate() {
                        gt[idx][j] -= kl_coeff * d;
                    }
                }
            }
        }
        Ok((g_label, g_tmpl))
    }

    /// One gradient-ascent step on [`ToyPolicy::objective`].
    ///
    /// When `learning_rate * kl_coeff` exceeds 0.5 the step is split into
    /// equal sub-steps (re-evaluating the gradient each time) so a stiff KL
    /// term cannot overshoot; sub-stepping stops early once updates vanish.
    pub fn update(&mut self, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<(), GrpoError> {
        let stiffness = cfg.learning_rate * cfg.kl_coeff;
        let substeps = if stiffness > 0.5 { (stiffness / 0.5).ceil() as u64 } else { 1 };
        let eta = cfg.learning_rate / substeps as f64;
        for _ in 0..substeps {
            let (gl, gt) = self.gradient(groups, cfg.kl_coeff)?;
            let mut largest: f64 = 0.0;
            for (z, g) in self.logits.iter_mut().zip(&gl) {
                for (zj, gj) in z.iter_mut().zip(g) {
                    *zj += eta * gj;
                    largest = largest.max((eta * gj).abs());
                }
            }
            if let (Some(t), Some(gt)) = (self.template_logits.as_mut(), gt) {
                for (z, g) in t.iter_mut().zip(&gt) {
                    for (zj, gj) in z.iter_mut().zip(g) {
                        *zj += eta * gj;
                        largest = largest.max((eta * gj).abs());
                    }
                }
            }
            if substeps > 1 && largest < 1e-15 {
                break;
            }
        }
        Ok(())
    }

    /// Greedy-label accuracy over `instances`.
    pub fn greedy_accuracy(&self, instances: &[Instance]) -> Result<f64, GrpoError> {
        if instances.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for inst in instances {
            let idx = self.position(&inst.id)?;
            correct += usize::from(self.greedy_label(idx) == inst.answer.index());
        }
        Ok(correct as f64 / instances.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::synthetic_dataset;

    fn group(id: &str, labels: &[usize], advantages: &[f64]) -> RolloutGroup {
        RolloutGroup {
            instance_id: id.into(),
            trajectories: vec![],
            actions: labels.iter().map(|&l| Action { label_index: l, template: None }).collect(),
            rewards: vec![0.0; labels.len()],
            advantages: advantages.to_vec(),
        }
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], 1.0);
        assert!(kl_divergence(&[0.3, 0.1], &[0.3, 0.1]).abs() < 1e-15);
    }

    #[test]
    fn zero_advantages_without_kl_leave_logits_unchanged() {
        let data = synthetic_dataset(3, 4, 0);
        let mut p = ToyPolicy::uniform(&data, 0);
        p.logits[0] = vec![0.5, -0.2, 0.1, 0.0];
        let before = p.clone();
        let cfg = GrpoConfig { kl_coeff: 0.0, ..Default::default() };
        p.update(&[group(&data[0].id, &[0, 1, 2, 3, 0], &[0.0; 5])], &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let data = synthetic_dataset(1, 4, 0);
        let mut p = ToyPolicy::uniform(&data, 0);
        let before = p.probs(0)[2];
        let adv = crate::grpo::group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        p.update(&[group(&data[0].id, &[2, 0, 1, 3, 0], &adv)], &GrpoConfig::default()).unwrap();
        assert!(p.probs(0)[2] > before);
    }

    #[test]
    fn huge_kl_coefficient_pins_policy_to_reference() {
        let data = synthetic_dataset(1, 4, 0);
        let mut p = ToyPolicy::uniform(&data, 0);
        let adv = crate::grpo::group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let cfg = GrpoConfig { kl_coeff: 1e6, ..Default::default() };
        for _ in 0..5 {
            p.update(&[group(&data[0].id, &[2, 0, 1, 3, 0], &adv)], &cfg).unwrap();
        }
        assert!(p.kl(0) < 1e-3, "kl {}", p.kl(0));
    }

    #[test]
    fn kl_shrinks_monotonically_without_advantages() {
        let data = synthetic_dataset(1, 4, 0);
        let mut p = ToyPolicy::uniform(&data, 0);
        p.logits[0] = vec![3.0, -1.0, 0.5, -2.0];
        let cfg = GrpoConfig { kl_coeff: 1.0, learning_rate: 0.5, ..Default::default() };
        let g = group(&data[0].id, &[0, 1, 2, 3, 0], &[0.0; 5]);
        let mut last = p.kl(0);
        while last >= 1e-10 {
            p.update(std::slice::from_ref(&g), &cfg).unwrap();
            let now = p.kl(0);
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn unknown_instance_is_reported() {
        let data = synthetic_dataset(1, 4, 0);
        let p = ToyPolicy::uniform(&data, 0);
        assert_eq!(
            p.objective(&[group("nope", &[0, 1], &[1.0, -1.0])], 0.0),
            Err(GrpoError::UnknownInstance("nope".into()))
        );
    }
}
