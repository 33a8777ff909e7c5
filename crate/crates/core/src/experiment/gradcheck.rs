//! Finite-difference checks through every network block and every loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, OpKind, Var};
use crate::data::{Batch, Modality};
use crate::nn::{Architecture, FusionNet, ModalityEmbedding, ModelError};
use crate::objectives::{
    cross_entropy, sdm_bidirectional, sdm_directional, tmff_loss, total_loss, LossError, LossWeights, MatchMatrix,
};
use crate::tensor::{Tensor, TensorError};

use super::config::GradCheckSection;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub max_rel_err: f64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub step: f64,
    pub batch: usize,
    pub inject_fault: Option<String>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.check.as_str()).collect()
    }
}

fn lift_model(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

fn lift_loss(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

struct Suite<'a> {
    settings: &'a GradCheckSection,
    fault: Option<(OpKind, f64)>,
    rng: ChaCha8Rng,
    checks: Vec<CheckResult>,
}

impl Suite<'_> {
    fn random(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let u = Uniform::new_inclusive(-scale, scale).expect("valid range");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| u.sample(&mut self.rng)).collect()).expect("positive extents")
    }

    fn opts(&self) -> GradCheckOptions {
        GradCheckOptions {
            step: self.settings.step,
            tolerance: self.settings.tolerance,
            magnitude_floor: self.settings.magnitude_floor,
        }
    }

    fn graph(&self, g: &mut Graph) {
        if let Some((kind, factor)) = self.fault {
            g.inject_fault(kind, factor);
        }
    }

    fn record(&mut self, check: String, report: GradCheckReport) {
        self.checks.push(CheckResult {
            check,
            passed: report.passed(),
            max_rel_err: report.max_rel_err(),
            report,
        });
    }

    /// Checks the parameters of `model` whose names start with `prefix`,
    /// together with the block inputs. `body` gets the full parameter list
    /// (unchecked ones as constants) and the input leaves, and returns the
    /// block output, which is reduced against a fixed random projection.
    fn block<F>(&mut self, name: &str, model: &FusionNet, prefix: &str, inputs: Vec<(String, Tensor)>, body: F) -> crate::Result<()>
    where
        F: Fn(&mut Graph, &[Var], &[Var]) -> Result<Var, ModelError>,
    {
        let store = model.params();
        let selected: Vec<usize> = (0..store.len())
            .filter(|&i| store.names()[i].starts_with(prefix))
            .collect();
        let k = inputs.len();
        let mut named = inputs;
        named.extend(selected.iter().map(|&i| (store.names()[i].clone(), store.tensors()[i].clone())));

        // Probe the output shape once to draw the reduction weights.
        let shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = named.iter().map(|(_, t)| g.leaf(t.clone())).collect();
            let p = bind_subset(&mut g, model, &selected, &vars[k..]);
            let out = body(&mut g, &p, &vars[..k])?;
            g.shape(out).to_vec()
        };
        let weights = self.random(&shape, 1.0);
        let report = grad_check(
            |g, vars| {
                self.graph(g);
                let p = bind_subset(g, model, &selected, &vars[k..]);
                let out = body(g, &p, &vars[..k]).map_err(lift_model)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            },
            &named,
            self.opts(),
        )?;
        self.record(name.to_string(), report);
        Ok(())
    }

    fn loss<F>(&mut self, name: &str, named: Vec<(String, Tensor)>, body: F) -> crate::Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, LossError>,
    {
        let report = grad_check(
            |g, vars| {
                self.graph(g);
                body(g, vars).map_err(lift_loss)
            },
            &named,
            self.opts(),
        )?;
        self.record(name.to_string(), report);
        Ok(())
    }
}

fn bind_subset(g: &mut Graph, model: &FusionNet, selected: &[usize], vars: &[Var]) -> Vec<Var> {
    let store = model.params();
    (0..store.len())
        .map(|i| match selected.iter().position(|&s| s == i) {
            Some(k) => vars[k],
            None => g.constant(store.tensors()[i].clone()),
        })
        .collect()
}

/// Runs every check on the configured micro model. Failures are reported,
/// not returned as errors.
pub fn run_gradcheck_suite(settings: &GradCheckSection, seed: u64) -> crate::Result<SuiteReport> {
    let fault = match &settings.inject_fault {
        Some(op) => Some((
            OpKind::parse(op).ok_or_else(|| {
                crate::Error::from(super::ConfigError::Invalid {
                    key: "gradcheck.inject_fault".into(),
                    value: op.clone(),
                    reason: "unknown operation".into(),
                })
            })?,
            settings.fault_factor,
        )),
        None => None,
    };
    let mut suite = Suite {
        settings,
        fault,
        rng: ChaCha8Rng::seed_from_u64(seed),
        checks: Vec::new(),
    };
    let cfg = settings.model;
    let widths = settings.widths;
    let b = settings.batch;
    let (d, t, td) = (cfg.d_uniform, cfg.n_tokens, cfg.token_dim());
    let model = FusionNet::new(cfg, widths, Architecture::full(), seed)?;

    for m in Modality::ALL {
        let raw = suite.random(&[b, widths.get(m)], 1.0);
        suite.block(&format!("encoder.{m}"), &model, &format!("encoder.{m}."), vec![], |g, p, _| {
            let x = g.constant(raw.clone());
            model.encode_modality(g, p, m, x)
        })?;
    }
    for m in Modality::ALL {
        let x = suite.random(&[b, d], 1.0);
        suite.block(
            &format!("projection.{m}"),
            &model,
            &format!("projection.{m}."),
            vec![("input".into(), x)],
            |g, p, x| Ok(model.project_and_normalize(g, p, m, x[0])?.1),
        )?;
    }
    for m in Modality::ALL {
        let x = suite.random(&[b, t, td], 1.0);
        suite.block(
            &format!("ima.{m}"),
            &model,
            &format!("ima.{m}."),
            vec![("input".into(), x)],
            |g, p, x| {
                let emb = ModalityEmbedding {
                    tokens: x[0],
                    modality: m,
                };
                Ok(model.ima_forward(g, p, emb)?.tokens)
            },
        )?;
    }
    let tokens: Vec<(String, Tensor)> = Modality::ALL
        .iter()
        .map(|m| (format!("input.{m}"), suite.random(&[b, t, td], 1.0)))
        .collect();
    suite.block("tcaf", &model, "tcaf.", tokens, |g, p, x| {
        let embs: Vec<ModalityEmbedding> = Modality::ALL
            .iter()
            .zip(x)
            .map(|(&modality, &tokens)| ModalityEmbedding { tokens, modality })
            .collect();
        model.tcaf_fuse(g, p, &embs)
    })?;
    let f = suite.random(&[b, model.fused_width()], 1.0);
    suite.block("head", &model, "head.", vec![("input".into(), f)], |g, p, x| {
        model.classify(g, p, x[0])
    })?;

    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let w = LossWeights::default();
    let q = MatchMatrix::aligned(b);
    let logits = suite.random(&[b, cfg.n_classes], 2.0);
    suite.loss("loss.cross_entropy", vec![("logits".into(), logits)], |g, v| {
        cross_entropy(g, v[0], &labels)
    })?;
    let emb = |s: &mut Suite, name: &str| (name.to_string(), s.random(&[b, d], 2.0));
    let pair = vec![emb(&mut suite, "a"), emb(&mut suite, "b")];
    suite.loss("loss.sdm_directional", pair.clone(), |g, v| {
        sdm_directional(g, v[0], v[1], &q, &w)
    })?;
    suite.loss("loss.sdm_bidirectional", pair, |g, v| {
        sdm_bidirectional(g, v[0], v[1], &q, &w)
    })?;
    let triple = vec![emb(&mut suite, "image"), emb(&mut suite, "radiomics"), emb(&mut suite, "text")];
    suite.loss("loss.tmff", triple, |g, v| Ok(tmff_loss(g, v[0], v[1], v[2], &q, &w)?.loss))?;

    let inputs = Modality::ALL.map(|m| suite.random(&[b, widths.get(m)], 1.0));
    let batch = Batch::new(inputs, labels.clone());
    let report = grad_check(
        |g, vars| {
            suite.graph(g);
            let out = model.forward(g, vars, &batch).map_err(lift_model)?;
            let terms = total_loss(g, out.logits, batch.labels(), &out.aligned, &q, &w).map_err(lift_loss)?;
            Ok(terms.total)
        },
        &model.params().named(),
        suite.opts(),
    )?;
    suite.record("loss.total".into(), report);

    let passed = suite.checks.iter().all(|c| c.passed);
    Ok(SuiteReport {
        tolerance: settings.tolerance,
        step: settings.step,
        batch: b,
        inject_fault: settings.inject_fault.clone(),
        passed,
        checks: suite.checks,
    })
}
