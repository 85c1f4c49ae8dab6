//! Pilot-aided test-time training: decoder-only Adam steps on the
//! reconstruction error at pilot positions, with the encoder frozen.
//!
//! Each observation is presented twice per step, once with the even and once
//! with the odd pilot-bearing tokens hidden from the encoder. Predictions at
//! the pilot entries of the hidden tokens are scored against their LS values.
//! Ground truth never enters the loss.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelDataset, ChannelMatrix};
use crate::error::{Error, Result};
use crate::estimation::{
    ls_pilot_estimate, model_estimate_batch, observe_dataset, pilot_tokens, summarize, PilotGrid, PilotPattern, SweepRow, METHOD_MODEL,
};
use crate::mae::{flops_estimate, FlopMode, ModelState, Tokens, DECODER, ENCODER};
use crate::nn::{adam_step, AdamState, Graph};

pub const MAX_STEPS: usize = 1000;
/// Adaptation aborts once the loss exceeds this multiple of the step-0 loss.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    OnScenarioChange,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub n_steps: usize,
    pub lr: f64,
    pub pattern: PilotPattern,
    pub reset_policy: ResetPolicy,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            lr: 1e-2,
            pattern: PilotPattern::default(),
            reset_policy: ResetPolicy::OnScenarioChange,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps > MAX_STEPS {
            return Err(Error::arg(format!("n_steps {} exceeds {MAX_STEPS}", self.n_steps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("lr must be positive, got {}", self.lr)));
        }
        self.pattern.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttTrace {
    /// Pilot loss before each update; entry `n_steps` is after the last one.
    pub pilot_loss: Vec<f64>,
    /// Mean full-channel NMSE in dB at each step, when ground truth was given.
    pub nmse_db: Option<Vec<f64>>,
    pub steps: usize,
    /// `steps * 2 * n_observations * flops_estimate(config, TttStep)`: each
    /// observation runs once per hold-out half.
    pub adapt_gflops: f64,
}

/// Per-observation adaptation input.
struct Prepared {
    tokens: Tokens,
    /// Visible (pilot-bearing) token ids.
    pilot_tokens: Vec<usize>,
    /// Element weights of one token: 1 at pilot entries.
    pilot_weights: Vec<Vec<f64>>,
}

fn prepare(model: &ModelState, observations: &[PilotGrid], pattern: &PilotPattern) -> Result<Vec<Prepared>> {
    let p = model.config.patching();
    let pd = p.patch_dim();
    let half = pd / 2;
    observations
        .iter()
        .map(|y| {
            let ls = ls_pilot_estimate(y, pattern)?;
            let (tokens, mask) = pilot_tokens(model, &ls)?;
            if mask.visible.len() < 2 {
                return Err(Error::arg("adaptation needs at least two pilot-bearing tokens"));
            }
            let mut weights = vec![vec![0.0; pd]; p.n_tokens()];
            for m in 0..ls.n_antennas {
                for &c in &ls.columns {
                    let (t, off) = p.locate(m, c);
                    weights[t][off] = 1.0;
                    weights[t][half + off] = 1.0;
                }
            }
            let pilot_weights = mask.visible.iter().map(|&t| weights[t].clone()).collect();
            Ok(Prepared {
                tokens,
                pilot_tokens: mask.visible,
                pilot_weights,
            })
        })
        .collect()
}

/// Hold-out half `parity` of an observation: every other pilot token is
/// hidden from the encoder and becomes a reconstruction target.
fn split(prep: &Prepared, parity: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut vis, mut hid) = (Vec::new(), Vec::new());
    for (j, &t) in prep.pilot_tokens.iter().enumerate() {
        if (j + parity).is_multiple_of(2) {
            hid.push(t)
        } else {
            vis.push(t)
        }
    }
    (vis, hid)
}

/// Loss (per complex pilot entry) over both hold-out halves of every
/// observation and, when `update` is set, one Adam step.
fn pilot_step(model: &mut ModelState, adam: &mut AdamState, prep: &[Prepared], update: bool) -> Result<f64> {
    let (t, pd) = (model.config.n_tokens(), model.config.patch_dim());
    // (observation, visible, hidden) for both halves.
    let items: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..prep.len())
        .flat_map(|b| (0..2).map(move |q| (b, q)))
        .map(|(b, q)| {
            let (vis, hid) = split(&prep[b], q);
            (b, vis, hid)
        })
        .collect();
    // One forward needs a shared visible count; group by it.
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, (_, vis, _)) in items.iter().enumerate() {
        groups.entry(vis.len()).or_default().push(i);
    }
    let weight_of = |b: usize, h: usize| -> &Vec<f64> {
        let j = prep[b]
            .pilot_tokens
            .iter()
            .position(|x| *x == h)
            .expect("hidden token is a pilot token");
        &prep[b].pilot_weights[j]
    };
    let total_weight: f64 = items
        .iter()
        .flat_map(|(b, _, hid)| hid.iter().map(move |&h| weight_of(*b, h).iter().sum::<f64>()))
        .sum();
    let mut loss_sum = 0.0;
    for members in groups.values() {
        let mut graph = Graph::new();
        let vars = graph.bind(&model.groups);
        let batch: Vec<&Tokens> = members.iter().map(|&i| &prep[items[i].0].tokens).collect();
        let visible: Vec<Vec<usize>> = members.iter().map(|&i| items[i].1.clone()).collect();
        let pred = model.forward(&mut graph, &vars, &batch, &visible)?;
        let mut weights = vec![0.0; members.len() * t * pd];
        for (r, &i) in members.iter().enumerate() {
            let (b, _, hid) = &items[i];
            for &h in hid {
                let start = (r * t + h) * pd;
                weights[start..start + pd].copy_from_slice(weight_of(*b, h));
            }
        }
        let target: Vec<f64> = batch.iter().flat_map(|tok| tok.data.iter().copied()).collect();
        let target = graph.constant(members.len() * t, pd, target)?;
        let w_sum: f64 = weights.iter().sum();
        let mse = graph.masked_mse(pred, target, &weights)?;
        // Weighted share of the global mean, per complex entry.
        let part = graph.scale(mse, 2.0 * w_sum / total_weight);
        loss_sum += graph.scalar(part);
        if update {
            graph.backward(part)?;
            graph.accumulate_param_grads(&mut model.groups);
        }
    }
    if update && loss_sum.is_finite() {
        adam_step(&mut model.groups, adam)?;
    } else {
        for g in &mut model.groups {
            g.clear_grads();
        }
    }
    Ok(loss_sum)
}

fn mean_nmse_db(model: &ModelState, observations: &[PilotGrid], pattern: &PilotPattern, truths: &[ChannelMatrix]) -> Result<f64> {
    let r = model_estimate_batch(model, observations, pattern, f64::NAN, Some(truths))?;
    Ok(r.iter().map(|e| e.nmse_db.unwrap()).sum::<f64>() / r.len() as f64)
}

/// Decoder-only adaptation on pilot observations. See [`ttt_adapt_tracked`].
pub fn ttt_adapt(model: &ModelState, observations: &[PilotGrid], cfg: &TttConfig) -> Result<(ModelState, TttTrace)> {
    ttt_adapt_tracked(model, observations, None, cfg)
}

/// As [`ttt_adapt`], additionally recording the mean full-channel NMSE
/// against `truths` at every step. `truths` is only read for that record.
pub fn ttt_adapt_tracked(
    model: &ModelState,
    observations: &[PilotGrid],
    truths: Option<&[ChannelMatrix]>,
    cfg: &TttConfig,
) -> Result<(ModelState, TttTrace)> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(Error::arg("adaptation needs at least one observation"));
    }
    if let Some(t) = truths {
        if t.len() != observations.len() {
            return Err(Error::arg("one ground-truth channel per observation is required"));
        }
    }
    let mut current = model.clone();
    current.groups[ENCODER].trainable = false;
    current.groups[DECODER].trainable = true;
    let prep = prepare(&current, observations, &cfg.pattern)?;
    let mut adam = AdamState::new(&current.groups, cfg.lr);

    let mut losses = Vec::with_capacity(cfg.n_steps + 1);
    let mut nmse = truths.map(|_| Vec::with_capacity(cfg.n_steps + 1));
    let record = |m: &ModelState, nmse: &mut Option<Vec<f64>>| -> Result<()> {
        if let (Some(list), Some(t)) = (nmse.as_mut(), truths) {
            list.push(mean_nmse_db(m, observations, &cfg.pattern, t)?);
        }
        Ok(())
    };
    if cfg.n_steps == 0 {
        let loss = pilot_step(&mut current, &mut adam, &prep, false)?;
        losses.push(loss);
        record(&current, &mut nmse)?;
        return Ok((model.clone(), trace(model, losses, nmse, 0, observations.len())));
    }

    let mut initial = None;
    for step in 0..=cfg.n_steps {
        let last = step == cfg.n_steps;
        let before = current.clone();
        let loss = pilot_step(&mut current, &mut adam, &prep, !last)?;
        let limit = initial.map_or(f64::INFINITY, |l: f64| DIVERGENCE_FACTOR * l);
        if !loss.is_finite() || loss > limit {
            let mut last_finite = before;
            restore_flags(&mut last_finite, model);
            return Err(Error::AdaptationDiverged {
                step,
                last_finite: Box::new(last_finite),
            });
        }
        initial.get_or_insert(loss);
        losses.push(loss);
        record(&before, &mut nmse)?;
    }
    restore_flags(&mut current, model);
    let n_obs = observations.len();
    Ok((current, trace(model, losses, nmse, cfg.n_steps, n_obs)))
}

fn restore_flags(m: &mut ModelState, like: &ModelState) {
    for (g, o) in m.groups.iter_mut().zip(&like.groups) {
        g.trainable = o.trainable;
        g.clear_grads();
    }
}

fn trace(model: &ModelState, pilot_loss: Vec<f64>, nmse_db: Option<Vec<f64>>, steps: usize, n_obs: usize) -> TttTrace {
    TttTrace {
        pilot_loss,
        nmse_db,
        steps,
        adapt_gflops: steps as f64 * (2 * n_obs) as f64 * flops_estimate(&model.config, FlopMode::TttStep),
    }
}

/// Restores the decoder from `checkpoint`; the encoder is left untouched.
pub fn reset_decoder(model: &ModelState, checkpoint: &ModelState) -> Result<ModelState> {
    if model.config != checkpoint.config {
        return Err(Error::arg("checkpoint config does not match the model"));
    }
    let mut out = model.clone();
    out.groups[DECODER] = checkpoint.groups[DECODER].clone();
    for g in &mut out.groups {
        g.clear_grads();
    }
    Ok(out)
}

/// Holds a pre-trained checkpoint and the currently adapted model, applying
/// the reset policy between adaptation episodes.
#[derive(Debug, Clone)]
pub struct TttSession {
    pretrained: ModelState,
    current: ModelState,
    scenario: Option<String>,
    pub cfg: TttConfig,
}

impl TttSession {
    pub fn new(pretrained: ModelState, cfg: TttConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            current: pretrained.clone(),
            pretrained,
            scenario: None,
            cfg,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.current
    }

    /// Adapts on observations from `scenario_id`, first resetting the
    /// decoder when the policy asks for it and the scenario changed.
    pub fn adapt(&mut self, scenario_id: &str, observations: &[PilotGrid]) -> Result<TttTrace> {
        let changed = self.scenario.as_deref().is_some_and(|s| s != scenario_id);
        if changed && self.cfg.reset_policy == ResetPolicy::OnScenarioChange {
            self.current = reset_decoder(&self.current, &self.pretrained)?;
        }
        self.scenario = Some(scenario_id.to_string());
        let (m, t) = ttt_adapt(&self.current, observations, &self.cfg)?;
        self.current = m;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOptions {
    /// Channels of each scenario used for observation and scoring.
    pub n_channels: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            n_channels: 64,
            snr_db: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Static model on the source scenario, for reference.
    pub source_nmse_db: f64,
    pub static_nmse_db: f64,
    pub adapted_nmse_db: f64,
    pub gain_db: f64,
    pub adapt_gflops: f64,
    pub trace: TttTrace,
}

/// Static versus adapted NMSE on scenario B for a model trained on A. The
/// adaptation sees only B's pilot observations; B's channels are used to
/// score the result.
pub fn transfer_experiment(
    model: &ModelState,
    scenario_a: &ChannelDataset,
    scenario_b: &ChannelDataset,
    cfg: &TttConfig,
    opts: &TransferOptions,
) -> Result<TransferReport> {
    let n_a = opts.n_channels.min(scenario_a.len());
    let obs_a = observe_dataset(scenario_a, n_a, &cfg.pattern, opts.snr_db, opts.seed)?;
    let source_nmse_db = mean_nmse_db(model, &obs_a, &cfg.pattern, &scenario_a.samples[..n_a])?;
    let n_b = opts.n_channels.min(scenario_b.len());
    let obs_b = observe_dataset(scenario_b, n_b, &cfg.pattern, opts.snr_db, opts.seed)?;
    let truths = &scenario_b.samples[..n_b];
    let (adapted, trace) = ttt_adapt_tracked(model, &obs_b, Some(truths), cfg)?;
    let static_nmse_db = trace.nmse_db.as_ref().unwrap()[0];
    let adapted_nmse_db = *trace.nmse_db.as_ref().unwrap().last().unwrap();
    debug_assert_eq!(adapted_nmse_db, mean_nmse_db(&adapted, &obs_b, &cfg.pattern, truths)?);
    Ok(TransferReport {
        source_nmse_db,
        static_nmse_db,
        adapted_nmse_db,
        gain_db: static_nmse_db - adapted_nmse_db,
        adapt_gflops: trace.adapt_gflops,
        trace,
    })
}

pub const METHOD_MODEL_TTT: &str = "model_ttt";

/// Model NMSE over the first `n_channels` channels of `ds` at each SNR.
/// With `ttt`, a fresh copy of the model is first adapted on that SNR's
/// pilot observations, as a receiver would on its current window.
pub fn model_sweep(
    model: &ModelState,
    ds: &ChannelDataset,
    pattern: &PilotPattern,
    snrs: &[f64],
    n_channels: usize,
    seed: u64,
    ttt: Option<&TttConfig>,
) -> Result<Vec<SweepRow>> {
    if ttt.is_some_and(|c| c.pattern != *pattern) {
        return Err(Error::arg("adaptation pattern differs from the sweep pattern"));
    }
    let n = n_channels.min(ds.len());
    let truths = &ds.samples[..n];
    let mut rows = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let obs = observe_dataset(ds, n, pattern, snr, seed)?;
        let (method, results) = match ttt {
            None => (METHOD_MODEL, model_estimate_batch(model, &obs, pattern, snr, Some(truths))?),
            Some(cfg) => {
                let (adapted, _) = ttt_adapt(model, &obs, cfg)?;
                (METHOD_MODEL_TTT, model_estimate_batch(&adapted, &obs, pattern, snr, Some(truths))?)
            }
        };
        let nmse: Vec<f64> = results.iter().map(|r| r.nmse_db.unwrap()).collect();
        rows.push(summarize(snr, method, &nmse));
    }
    Ok(rows)
}

/// `step,pilot_loss,nmse_db` rows; `nmse_db` is empty without ground truth.
pub fn trace_csv(trace: &TttTrace) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "pilot_loss", "nmse_db"])?;
    for (i, loss) in trace.pilot_loss.iter().enumerate() {
        let nmse = trace.nmse_db.as_ref().map_or(String::new(), |v| v[i].to_string());
        w.write_record([i.to_string(), loss.to_string(), nmse])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_dataset, ScenarioConfig};
    use crate::mae::ModelConfig;

    fn setup() -> (ModelState, ChannelDataset, TttConfig) {
        let sc = ScenarioConfig {
            n_antennas: 4,
            n_subcarriers: 16,
            n_clusters: 3,
            ..ScenarioConfig::default()
        };
        let ds = synthesize_dataset(&sc, 6).unwrap();
        let cfg = ModelConfig {
            grid_rows: 4,
            grid_cols: 16,
            patch_rows: 4,
            patch_cols: 1,
            embed_dim: 16,
            n_heads: 2,
            encoder_depth: 1,
            decoder_embed_dim: 8,
            decoder_heads: 1,
            decoder_depth: 1,
            mlp_ratio: 2,
            mask_ratio: 0.5,
            target_params: 0,
        };
        let model = ModelState::init(&cfg, 1).unwrap();
        let ttt = TttConfig {
            n_steps: 3,
            pattern: PilotPattern::new(2, 0, num_complex::Complex64::new(1.0, 0.0)).unwrap(),
            ..TttConfig::default()
        };
        (model, ds, ttt)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (model, ds, mut cfg) = setup();
        cfg.n_steps = 0;
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        let (m, t) = ttt_adapt(&model, &obs, &cfg).unwrap();
        assert_eq!(m, model);
        assert_eq!(t.pilot_loss.len(), 1);
        assert_eq!(t.adapt_gflops, 0.0);
    }

    #[test]
    fn encoder_frozen_and_trace_lengths() {
        let (model, ds, cfg) = setup();
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        let (m, t) = ttt_adapt_tracked(&model, &obs, Some(&ds.samples[..4]), &cfg).unwrap();
        assert!(m.encoder().same_values(model.encoder()));
        assert!(!m.decoder().same_values(model.decoder()));
        assert_eq!(t.pilot_loss.len(), 4);
        assert_eq!(t.nmse_db.as_ref().unwrap().len(), 4);
        assert_eq!(t.adapt_gflops, 3.0 * 8.0 * flops_estimate(&model.config, FlopMode::TttStep));
        assert_eq!(m.encoder().trainable, model.encoder().trainable);
    }

    #[test]
    fn truth_does_not_influence_adaptation() {
        let (model, ds, cfg) = setup();
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        let truths = ds.samples[..4].to_vec();
        let corrupted: Vec<ChannelMatrix> = truths
            .iter()
            .map(|h| ChannelMatrix::from_fn(h.rows(), h.cols(), |m, k| h.get(m, k) * 3.0 + 1.0))
            .collect();
        let (a, _) = ttt_adapt_tracked(&model, &obs, Some(&truths), &cfg).unwrap();
        let (b, _) = ttt_adapt_tracked(&model, &obs, Some(&corrupted), &cfg).unwrap();
        assert_eq!(a.groups, b.groups);
    }

    #[test]
    fn errors() {
        let (model, ds, mut cfg) = setup();
        assert!(matches!(ttt_adapt(&model, &[], &cfg), Err(Error::InvalidArgument(_))));
        cfg.n_steps = MAX_STEPS + 1;
        let obs = observe_dataset(&ds, 1, &cfg.pattern, 20.0, 0).unwrap();
        assert!(ttt_adapt(&model, &obs, &cfg).is_err());
    }

    #[test]
    fn huge_lr_reports_divergence_with_finite_state() {
        let (model, ds, mut cfg) = setup();
        cfg.lr = 1e6;
        cfg.n_steps = 50;
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        match ttt_adapt(&model, &obs, &cfg) {
            Err(Error::AdaptationDiverged { step, last_finite }) => {
                assert!(step >= 1);
                assert!(last_finite.encoder().same_values(model.encoder()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.pilot_loss)),
        }
    }

    #[test]
    fn reset_restores_decoder() {
        let (model, ds, cfg) = setup();
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        let (adapted, _) = ttt_adapt(&model, &obs, &cfg).unwrap();
        let r = reset_decoder(&adapted, &model).unwrap();
        assert!(r.decoder().same_values(model.decoder()));
        assert_eq!(reset_decoder(&r, &model).unwrap(), r);
        let mut other = model.config.clone();
        other.embed_dim = 8;
        let other = ModelState::init(&other, 0).unwrap();
        assert!(reset_decoder(&adapted, &other).is_err());
    }

    #[test]
    fn session_resets_on_scenario_change_only() {
        let (model, ds, cfg) = setup();
        let obs = observe_dataset(&ds, 4, &cfg.pattern, 20.0, 0).unwrap();
        let mut s = TttSession::new(model.clone(), cfg.clone()).unwrap();
        s.adapt("a", &obs).unwrap();
        let after_a = s.model().clone();
        s.adapt("a", &obs).unwrap();
        let expected = ttt_adapt(&after_a, &obs, &cfg).unwrap().0;
        assert_eq!(s.model().groups, expected.groups);
        s.adapt("b", &obs).unwrap();
        let fresh = ttt_adapt(&reset_decoder(&expected, &model).unwrap(), &obs, &cfg).unwrap().0;
        assert_eq!(s.model().groups, fresh.groups);
    }
}
