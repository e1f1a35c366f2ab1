//! Full-model gradient check against central finite differences.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{AttendMode, DecoderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{build_graph_with, EdgeMode, Example, PhraseGrounding};
use crate::model::{Model, ModelConfig};
use crate::params::param_group;
use crate::training::{batch_gradients, batch_loss_eval, Batch};
use crate::vocab::{BOS, EOS};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that entries whose true
/// gradient is essentially zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoInterModalFusion,
    FullyConnectedGrounding,
    UnifiedParameters,
    DecoderAttendVisual,
    DecoderAttendBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoInterModalFusion,
        Ablation::FullyConnectedGrounding,
        Ablation::UnifiedParameters,
        Ablation::DecoderAttendVisual,
        Ablation::DecoderAttendBoth,
    ];
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" | "default" => Ablation::None,
            "no-inter-modal-fusion" => Ablation::NoInterModalFusion,
            "fully-connected-grounding" => Ablation::FullyConnectedGrounding,
            "unified-parameters" => Ablation::UnifiedParameters,
            "decoder-attend-visual" => Ablation::DecoderAttendVisual,
            "decoder-attend-both" => Ablation::DecoderAttendBoth,
            _ => return Err(Error::Config(format!("unknown ablation `{s}`"))),
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoInterModalFusion => "no-inter-modal-fusion",
            Ablation::FullyConnectedGrounding => "fully-connected-grounding",
            Ablation::UnifiedParameters => "unified-parameters",
            Ablation::DecoderAttendVisual => "decoder-attend-visual",
            Ablation::DecoderAttendBoth => "decoder-attend-both",
        })
    }
}

pub const TOY_VOCAB: usize = 11;
pub const TOY_FEATURE_DIM: usize = 6;

pub fn toy_config(ablation: Ablation) -> ModelConfig {
    let mut enc = EncoderConfig {
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        n_layers: 2,
        dropout: 0.0,
        visual_feat_dim: TOY_FEATURE_DIM,
        unified_parameters: false,
        inter_modal_fusion: true,
    };
    let mut dec = DecoderConfig {
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        n_layers: 2,
        dropout: 0.0,
        attend: AttendMode::Textual,
    };
    match ablation {
        Ablation::NoInterModalFusion => enc.inter_modal_fusion = false,
        Ablation::UnifiedParameters => enc.unified_parameters = true,
        Ablation::DecoderAttendVisual => dec.attend = AttendMode::VisualOnly,
        Ablation::DecoderAttendBoth => dec.attend = AttendMode::Both,
        Ablation::None | Ablation::FullyConnectedGrounding => {}
    }
    ModelConfig {
        encoder: enc,
        decoder: dec,
        src_vocab: TOY_VOCAB,
        tgt_vocab: TOY_VOCAB,
    }
}

/// Two seeded examples of different lengths, both with grounded objects.
pub fn toy_examples(ablation: Ablation, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mode = if ablation == Ablation::FullyConnectedGrounding {
        EdgeMode::FullyConnected
    } else {
        EdgeMode::Grounded
    };
    let mut feat = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..TOY_FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let specs: [(&[usize], Vec<PhraseGrounding>, &[usize]); 2] = [
        (
            &[4, 5, 6, 7, 8],
            vec![PhraseGrounding::new(0, 2, feat(2)), PhraseGrounding::new(3, 5, feat(1))],
            &[5, 9, 4, 10],
        ),
        (&[9, 10, 4, 6], vec![PhraseGrounding::new(1, 3, feat(1))], &[7, 8]),
    ];
    specs
        .into_iter()
        .map(|(src, groundings, tgt)| {
            let graph = build_graph_with(src, &groundings, TOY_FEATURE_DIM, mode)?;
            let mut target = vec![BOS];
            target.extend_from_slice(tgt);
            target.push(EOS);
            Ok(Example { graph, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub ablation: Ablation,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Passes iff every group is strictly under `tolerance`.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ablation: {}", self.ablation)?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<24} {:>5} entries  max rel err {:.3e}  (worst {}[{}])",
                g.group, g.checked, g.max_rel_error, g.worst_param, g.worst_index
            )?;
        }
        write!(f, "  overall max rel err {:.3e}", self.max_rel_error())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of the batch loss with central differences
/// for every scalar of every parameter.
pub fn check_model(model: &mut Model, examples: &[Example], h: f64, ablation: Ablation) -> Result<GradCheckReport> {
    let batch = Batch::new((0..examples.len()).collect(), examples)?;
    let (_, grads) = batch_gradients(model, &batch, examples, None)?;
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let n = model.store.get(id).numel();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entry = groups.entry(param_group(&name)).or_insert_with(|| GroupResult {
            group: param_group(&name),
            max_rel_error: 0.0,
            worst_param: name.clone(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        });
        for k in 0..n {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + h;
            let plus = batch_loss_eval(model, &batch, examples)?;
            model.store.get_mut(id).data_mut()[k] = orig - h;
            let minus = batch_loss_eval(model, &batch, examples)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[k], numeric);
            entry.checked += 1;
            if rel > entry.max_rel_error || !rel.is_finite() {
                entry.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                entry.worst_param = name.clone();
                entry.worst_index = k;
                entry.analytic = analytic[k];
                entry.numeric = numeric;
            }
        }
    }
    Ok(GradCheckReport {
        ablation,
        groups: groups.into_values().collect(),
    })
}

/// Builds the seeded toy model and batch for `ablation` and checks it.
pub fn run_toy(ablation: Ablation, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut model = Model::new(toy_config(ablation), seed)?;
    let examples = toy_examples(ablation, seed)?;
    check_model(&mut model, &examples, h, ablation)
}
