//! Genotype to phenotype mapping and static network feasibility.
//!
//! A unit's phenotype is the depth-first rendering of its derivation:
//! terminals verbatim, parameter blocks as `name:value`. A full genotype
//! maps to a [`NetworkPlan`]: ordered layer descriptors, one learning
//! descriptor, and the input shape. `check_valid` propagates shapes through
//! the plan (channels-last) and flags networks no backend could build.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::genotype::{EvoUnit, Genotype};
use crate::grammar::{Grammar, OuterStructure, ParamKind, Symbol};

#[derive(Debug, Error)]
pub enum PhenotypeError {
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("incomplete derivation: gene stream ended expanding `{0}`")]
    Incomplete(String),
    #[error("gene {index}: expands `{found}`, expected `{expected}`")]
    RuleMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("gene {index} ({rule}): choice {choice} out of range")]
    ChoiceOutOfRange {
        index: usize,
        rule: String,
        choice: usize,
    },
    #[error("gene {index} ({rule}): parameter group count mismatch")]
    ParamMismatch { index: usize, rule: String },
    #[error("phenotype `{text}`: {reason}")]
    BadPhenotype { text: String, reason: String },
    #[error("plan needs exactly one learning unit, found {0}")]
    LearningCount(usize),
    #[error("genotype error: {0}")]
    Genotype(#[from] crate::genotype::GenotypeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    PoolAvg,
    PoolMax,
    Dropout,
    BatchNorm,
    Fc,
}

impl LayerKind {
    fn parse(text: &str) -> Option<LayerKind> {
        match text {
            "conv" => Some(LayerKind::Conv),
            "pool-avg" => Some(LayerKind::PoolAvg),
            "pool-max" => Some(LayerKind::PoolMax),
            "dropout" => Some(LayerKind::Dropout),
            "batch-norm" => Some(LayerKind::BatchNorm),
            "fc" => Some(LayerKind::Fc),
            _ => None,
        }
    }

    /// Attribute keys this layer kind accepts, besides `layer` itself.
    fn allowed_attrs(self) -> &'static [&'static str] {
        match self {
            LayerKind::Conv => &[
                "num-filters",
                "filter-shape",
                "stride",
                "padding",
                "act",
                "bias",
            ],
            LayerKind::PoolAvg | LayerKind::PoolMax => &["kernel-size", "stride", "padding"],
            LayerKind::Dropout => &["rate"],
            LayerKind::BatchNorm => &[],
            LayerKind::Fc => &["act", "num-units", "bias"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// One layer of the decoded network.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub attrs: BTreeMap<String, String>,
}

impl LayerSpec {
    fn attr(&self, key: &str) -> Result<&str, PhenotypeError> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PhenotypeError::BadPhenotype {
                text: format!("{:?}", self.kind),
                reason: format!("missing attribute `{key}`"),
            })
    }

    fn attr_usize(&self, key: &str) -> Result<usize, PhenotypeError> {
        let raw = self.attr(key)?;
        raw.parse().map_err(|_| PhenotypeError::BadPhenotype {
            text: format!("{:?}", self.kind),
            reason: format!("attribute `{key}`={raw} not an integer"),
        })
    }

    pub fn num_filters(&self) -> Result<usize, PhenotypeError> {
        self.attr_usize("num-filters")
    }

    pub fn filter_shape(&self) -> Result<usize, PhenotypeError> {
        self.attr_usize("filter-shape")
    }

    pub fn kernel_size(&self) -> Result<usize, PhenotypeError> {
        self.attr_usize("kernel-size")
    }

    pub fn stride(&self) -> Result<usize, PhenotypeError> {
        self.attr_usize("stride")
    }

    pub fn num_units(&self) -> Result<usize, PhenotypeError> {
        self.attr_usize("num-units")
    }

    pub fn rate(&self) -> Result<f64, PhenotypeError> {
        let raw = self.attr("rate")?;
        raw.parse().map_err(|_| PhenotypeError::BadPhenotype {
            text: format!("{:?}", self.kind),
            reason: format!("rate `{raw}` not numeric"),
        })
    }

    pub fn padding(&self) -> Result<Padding, PhenotypeError> {
        match self.attr("padding")? {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(PhenotypeError::BadPhenotype {
                text: format!("{:?}", self.kind),
                reason: format!("unknown padding `{other}`"),
            }),
        }
    }

    pub fn activation(&self) -> Result<Activation, PhenotypeError> {
        match self.attr("act")? {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => Err(PhenotypeError::BadPhenotype {
                text: format!("{:?}", self.kind),
                reason: format!("unknown activation `{other}`"),
            }),
        }
    }

    pub fn bias(&self) -> Result<bool, PhenotypeError> {
        match self.attr("bias")? {
            "True" => Ok(true),
            "False" => Ok(false),
            other => Err(PhenotypeError::BadPhenotype {
                text: format!("{:?}", self.kind),
                reason: format!("unknown bias `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnAlgo {
    GradientDescent,
    Adam,
    Rmsprop,
}

/// Decoded learning strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningSpec {
    pub algorithm: LearnAlgo,
    /// Numeric hyper-parameters; `nesterov` is encoded as 0/1.
    pub hyper: BTreeMap<String, f64>,
    pub batch_size: usize,
    pub early_stop_patience: usize,
}

impl LearningSpec {
    pub fn hyper(&self, key: &str) -> f64 {
        self.hyper[key]
    }

    pub fn lr(&self) -> f64 {
        self.hyper("lr")
    }

    pub fn decay(&self) -> f64 {
        self.hyper("decay")
    }
}

/// Ordered layers, one learning strategy, and the input shape (h, w, c).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    pub layers: Vec<LayerSpec>,
    pub learning: LearningSpec,
    pub input_shape: (usize, usize, usize),
}

fn format_param(kind: ParamKind, value: f64) -> String {
    match kind {
        ParamKind::Int => format!("{}", value as i64),
        _ => format!("{value:?}"),
    }
}

fn derive_walk(
    grammar: &Grammar,
    nt: &str,
    unit: &EvoUnit,
    pos: &mut usize,
    out: &mut Vec<String>,
) -> Result<(), PhenotypeError> {
    let index = *pos;
    let gene = unit
        .genes
        .get(index)
        .ok_or_else(|| PhenotypeError::Incomplete(nt.to_string()))?;
    if gene.nonterminal != nt {
        return Err(PhenotypeError::RuleMismatch {
            index,
            expected: nt.to_string(),
            found: gene.nonterminal.clone(),
        });
    }
    let alts = grammar
        .rule(nt)
        .ok_or_else(|| PhenotypeError::UnknownRule(nt.to_string()))?;
    let alt = alts.get(gene.choice).ok_or(PhenotypeError::ChoiceOutOfRange {
        index,
        rule: nt.to_string(),
        choice: gene.choice,
    })?;
    if alt.param_blocks().count() != gene.params.len() {
        return Err(PhenotypeError::ParamMismatch {
            index,
            rule: nt.to_string(),
        });
    }
    *pos += 1;
    let mut param_groups = gene.params.iter();
    for sym in &alt.symbols {
        match sym {
            Symbol::Terminal(t) => out.push(t.clone()),
            Symbol::Param(block) => {
                let group = param_groups.next().expect("group count checked above");
                let values: Vec<String> =
                    group.iter().map(|&v| format_param(block.kind, v)).collect();
                out.push(format!("{}:{}", block.name, values.join(",")));
            }
            Symbol::Nonterminal(child) => derive_walk(grammar, child, unit, pos, out)?,
        }
    }
    Ok(())
}

/// Render a unit's phenotype string (depth-first, space-separated tokens).
pub fn derive(unit: &EvoUnit, grammar: &Grammar) -> Result<String, PhenotypeError> {
    let mut out = Vec::new();
    let mut pos = 0;
    derive_walk(grammar, &unit.start, unit, &mut pos, &mut out)?;
    Ok(out.join(" "))
}

/// Parse a `layer:...` phenotype string into a [`LayerSpec`].
///
/// Unknown or duplicate attribute keys are rejected so nothing a grammar
/// emits can silently leak past the plan.
pub fn parse_layer(text: &str) -> Result<LayerSpec, PhenotypeError> {
    let mut tokens = text.split_whitespace();
    let head = tokens.next().ok_or_else(|| PhenotypeError::BadPhenotype {
        text: text.to_string(),
        reason: "empty phenotype".into(),
    })?;
    let kind_name = head
        .strip_prefix("layer:")
        .ok_or_else(|| PhenotypeError::BadPhenotype {
            text: text.to_string(),
            reason: "expected leading layer:<kind>".into(),
        })?;
    let kind = LayerKind::parse(kind_name).ok_or_else(|| PhenotypeError::BadPhenotype {
        text: text.to_string(),
        reason: format!("unknown layer kind `{kind_name}`"),
    })?;
    let mut attrs = BTreeMap::new();
    for token in tokens {
        let (key, value) = token
            .split_once(':')
            .ok_or_else(|| PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("token `{token}` is not key:value"),
            })?;
        if !kind.allowed_attrs().contains(&key) {
            return Err(PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("attribute `{key}` not valid for {kind:?}"),
            });
        }
        if attrs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("duplicate attribute `{key}`"),
            });
        }
    }
    for key in kind.allowed_attrs() {
        if !attrs.contains_key(*key) {
            return Err(PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("missing attribute `{key}`"),
            });
        }
    }
    Ok(LayerSpec { kind, attrs })
}

/// Parse a `learning:...` phenotype string into a [`LearningSpec`].
pub fn parse_learning(text: &str) -> Result<LearningSpec, PhenotypeError> {
    let mut tokens = text.split_whitespace();
    let head = tokens.next().ok_or_else(|| PhenotypeError::BadPhenotype {
        text: text.to_string(),
        reason: "empty phenotype".into(),
    })?;
    let algo_name = head
        .strip_prefix("learning:")
        .ok_or_else(|| PhenotypeError::BadPhenotype {
            text: text.to_string(),
            reason: "expected leading learning:<algorithm>".into(),
        })?;
    let (algorithm, hyper_keys): (LearnAlgo, &[&str]) = match algo_name {
        "gradient-descent" => (
            LearnAlgo::GradientDescent,
            &["lr", "momentum", "decay", "nesterov"],
        ),
        "adam" => (LearnAlgo::Adam, &["lr", "beta1", "beta2", "decay"]),
        "rmsprop" => (LearnAlgo::Rmsprop, &["lr", "rho", "decay"]),
        other => {
            return Err(PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("unknown learning algorithm `{other}`"),
            })
        }
    };

    let mut hyper = BTreeMap::new();
    let mut batch_size = None;
    let mut patience = None;
    for token in tokens {
        let (key, value) = token
            .split_once(':')
            .ok_or_else(|| PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("token `{token}` is not key:value"),
            })?;
        match key {
            "batch_size" => {
                batch_size = Some(value.parse().map_err(|_| PhenotypeError::BadPhenotype {
                    text: text.to_string(),
                    reason: format!("bad batch_size `{value}`"),
                })?)
            }
            "early_stop" => {
                patience = Some(value.parse().map_err(|_| PhenotypeError::BadPhenotype {
                    text: text.to_string(),
                    reason: format!("bad early_stop `{value}`"),
                })?)
            }
            "nesterov" => {
                let flag = match value {
                    "True" => 1.0,
                    "False" => 0.0,
                    _ => {
                        return Err(PhenotypeError::BadPhenotype {
                            text: text.to_string(),
                            reason: format!("bad nesterov `{value}`"),
                        })
                    }
                };
                hyper.insert("nesterov".to_string(), flag);
            }
            _ if hyper_keys.contains(&key) => {
                let parsed: f64 = value.parse().map_err(|_| PhenotypeError::BadPhenotype {
                    text: text.to_string(),
                    reason: format!("bad hyper `{key}`=`{value}`"),
                })?;
                hyper.insert(key.to_string(), parsed);
            }
            other => {
                return Err(PhenotypeError::BadPhenotype {
                    text: text.to_string(),
                    reason: format!("hyper `{other}` not valid for {algorithm:?}"),
                })
            }
        }
    }
    for key in hyper_keys {
        if !hyper.contains_key(*key) {
            return Err(PhenotypeError::BadPhenotype {
                text: text.to_string(),
                reason: format!("missing hyper `{key}`"),
            });
        }
    }
    Ok(LearningSpec {
        algorithm,
        hyper,
        batch_size: batch_size.ok_or_else(|| PhenotypeError::BadPhenotype {
            text: text.to_string(),
            reason: "missing batch_size".into(),
        })?,
        early_stop_patience: patience.ok_or_else(|| PhenotypeError::BadPhenotype {
            text: text.to_string(),
            reason: "missing early_stop".into(),
        })?,
    })
}

/// Decode a genotype into its network plan.
///
/// Resolve order defines layer order; the single `learning:` unit becomes
/// the learning descriptor. Aliased units yield identical layers at every
/// occurrence.
pub fn build_plan(
    genotype: &Genotype,
    grammar: &Grammar,
    _outer: &OuterStructure,
    input_shape: (usize, usize, usize),
) -> Result<NetworkPlan, PhenotypeError> {
    let units = genotype.resolve()?;
    let mut layers = Vec::new();
    let mut learning = None;
    let mut learning_count = 0;
    for unit in units {
        let text = derive(unit, grammar)?;
        if text.starts_with("learning:") {
            learning_count += 1;
            learning = Some(parse_learning(&text)?);
        } else {
            layers.push(parse_layer(&text)?);
        }
    }
    if learning_count != 1 {
        return Err(PhenotypeError::LearningCount(learning_count));
    }
    Ok(NetworkPlan {
        layers,
        learning: learning.expect("count checked"),
        input_shape,
    })
}

/// Dump a plan's phenotype strings, one unit per line (layers then learning).
pub fn plan_lines(genotype: &Genotype, grammar: &Grammar) -> Result<Vec<String>, PhenotypeError> {
    genotype
        .resolve()?
        .into_iter()
        .map(|unit| derive(unit, grammar))
        .collect()
}

/// Statically propagate shapes through the plan.
///
/// Channels-last layout. Valid padding computes floor((d-k)/s)+1 and needs
/// the kernel to fit; same padding computes ceil(d/s). Fully-connected
/// layers flatten. Returns the offending reason when any dimension drops
/// below one.
pub fn check_valid(plan: &NetworkPlan) -> Result<(), String> {
    let (mut h, mut w, mut c) = plan.input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(format!("input shape {h}x{w}x{c} not positive"));
    }
    for (i, layer) in plan.layers.iter().enumerate() {
        let describe = |e: &PhenotypeError| format!("layer {i}: {e}");
        match layer.kind {
            LayerKind::Conv => {
                let k = layer.filter_shape().map_err(|e| describe(&e))?;
                let s = layer.stride().map_err(|e| describe(&e))?;
                let padding = layer.padding().map_err(|e| describe(&e))?;
                (h, w) = spatial_out(h, w, k, s, padding)
                    .map_err(|reason| format!("layer {i} (conv): {reason}"))?;
                c = layer.num_filters().map_err(|e| describe(&e))?;
            }
            LayerKind::PoolAvg | LayerKind::PoolMax => {
                let k = layer.kernel_size().map_err(|e| describe(&e))?;
                let s = layer.stride().map_err(|e| describe(&e))?;
                let padding = layer.padding().map_err(|e| describe(&e))?;
                (h, w) = spatial_out(h, w, k, s, padding)
                    .map_err(|reason| format!("layer {i} (pool): {reason}"))?;
            }
            LayerKind::Dropout | LayerKind::BatchNorm => {}
            LayerKind::Fc => {
                let units = layer.num_units().map_err(|e| describe(&e))?;
                if units == 0 {
                    return Err(format!("layer {i} (fc): zero units"));
                }
                h = 1;
                w = 1;
                c = units;
            }
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(format!("layer {i}: dimension collapsed to zero"));
        }
    }
    match plan.layers.last() {
        Some(last) if last.kind == LayerKind::Fc => {
            if last.activation().map_err(|e| e.to_string())? != Activation::Softmax {
                return Err("final layer is not softmax-activated".into());
            }
            if c != 2 {
                return Err(format!("final layer has {c} units, expected 2"));
            }
        }
        _ => return Err("final layer is not a fully-connected softmax".into()),
    }
    Ok(())
}

fn spatial_out(
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    padding: Padding,
) -> Result<(usize, usize), String> {
    match padding {
        Padding::Valid => {
            if k > h || k > w {
                Err(format!("kernel {k} exceeds input {h}x{w}"))
            } else {
                Ok(((h - k) / s + 1, (w - k) / s + 1))
            }
        }
        Padding::Same => Ok((h.div_ceil(s), w.div_ceil(s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{random_genotype, DsgeGene, Slot};
    use crate::grammar::{parse_grammar, parse_outer, DEFAULT_GRAMMAR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fig_grammar() -> Grammar {
        parse_grammar(DEFAULT_GRAMMAR).unwrap()
    }

    fn gene(nt: &str, choice: usize, params: &[&[f64]]) -> DsgeGene {
        DsgeGene {
            nonterminal: nt.to_string(),
            choice,
            params: params.iter().map(|g| g.to_vec()).collect(),
        }
    }

    fn unit(id: u32, start: &str, genes: Vec<DsgeGene>) -> EvoUnit {
        EvoUnit {
            unit_id: id,
            start: start.to_string(),
            genes,
        }
    }

    fn fc_unit(id: u32, act_choice: usize, units: f64, bias_choice: usize) -> EvoUnit {
        unit(
            id,
            "classification",
            vec![
                gene("classification", 0, &[]),
                gene("fully-connected", 0, &[&[units]]),
                gene("activation", act_choice, &[]),
                gene("bias", bias_choice, &[]),
            ],
        )
    }

    fn softmax_unit(id: u32) -> EvoUnit {
        unit(id, "softmax", vec![gene("softmax", 0, &[])])
    }

    fn adam_learning_unit(id: u32, lr: f64, b1: f64, b2: f64, decay: f64, batch: f64) -> EvoUnit {
        unit(
            id,
            "learning",
            vec![
                gene("learning", 2, &[&[batch]]),
                gene("adam", 0, &[&[lr], &[b1], &[b2], &[decay]]),
                gene("stop", 0, &[&[8.0]]),
            ],
        )
    }

    fn conv_unit(
        id: u32,
        filters: f64,
        k: f64,
        s: f64,
        pad_choice: usize,
        act_choice: usize,
    ) -> EvoUnit {
        unit(
            id,
            "features",
            vec![
                gene("features", 0, &[]),
                gene("convolution", 0, &[&[filters], &[k], &[s]]),
                gene("padding", pad_choice, &[]),
                gene("activation", act_choice, &[]),
                gene("bias", 0, &[]),
            ],
        )
    }

    #[test]
    fn derives_fc_phenotype_line() {
        let g = fig_grammar();
        let text = derive(&fc_unit(0, 1, 128.0, 0), &g).unwrap();
        assert_eq!(text, "layer:fc act:relu num-units:128 bias:True");
    }

    #[test]
    fn derives_softmax_phenotype_line() {
        let g = fig_grammar();
        let text = derive(&softmax_unit(0), &g).unwrap();
        assert_eq!(text, "layer:fc act:softmax num-units:2 bias:True");
    }

    #[test]
    fn derives_zero_rate_dropout_with_full_precision() {
        let g = fig_grammar();
        let u = unit(
            0,
            "dropout",
            vec![gene("dropout", 0, &[&[0.0]])],
        );
        assert_eq!(derive(&u, &g).unwrap(), "layer:dropout rate:0.0");
    }

    #[test]
    fn incomplete_unit_is_a_structural_error() {
        let g = fig_grammar();
        let u = unit(0, "classification", vec![gene("classification", 0, &[])]);
        assert!(matches!(
            derive(&u, &g),
            Err(PhenotypeError::Incomplete(_))
        ));
    }

    fn minimal_genotype() -> Genotype {
        Genotype::new(
            vec![
                vec![Slot::Owned(conv_unit(0, 32.0, 3.0, 1.0, 0, 1))],
                vec![Slot::Owned(fc_unit(1, 1, 128.0, 0))],
                vec![Slot::Owned(softmax_unit(2))],
                vec![Slot::Owned(adam_learning_unit(
                    3, 0.001, 0.9, 0.999, 0.0, 64.0,
                ))],
            ],
            1,
        )
    }

    fn full_outer() -> OuterStructure {
        parse_outer("[(features,1,30),(classification,1,10),(softmax,1,1),(learning,1,1)]")
            .unwrap()
    }

    #[test]
    fn minimal_plan_has_three_layers_plus_learning() {
        let g = fig_grammar();
        let plan = build_plan(&minimal_genotype(), &g, &full_outer(), (24, 24, 1)).unwrap();
        assert_eq!(plan.layers.len(), 3);
        assert_eq!(plan.learning.algorithm, LearnAlgo::Adam);
        assert_eq!(plan.learning.batch_size, 64);
        assert_eq!(plan.learning.early_stop_patience, 8);
    }

    #[test]
    fn published_best_topology_decodes() {
        // 4 conv + 1 fc + softmax, adam with the reported hyper-parameters
        let g = fig_grammar();
        let genotype = Genotype::new(
            vec![
                vec![
                    Slot::Owned(conv_unit(0, 64.0, 3.0, 1.0, 0, 1)),
                    Slot::Owned(conv_unit(1, 128.0, 3.0, 1.0, 0, 1)),
                    Slot::Owned(conv_unit(2, 128.0, 2.0, 2.0, 0, 1)),
                    Slot::Owned(conv_unit(3, 64.0, 2.0, 1.0, 0, 1)),
                ],
                vec![Slot::Owned(fc_unit(4, 1, 512.0, 0))],
                vec![Slot::Owned(softmax_unit(5))],
                vec![Slot::Owned(adam_learning_unit(
                    6, 0.0001, 0.75192, 0.91021, 0.00047, 98.0,
                ))],
            ],
            1,
        );
        let plan = build_plan(&genotype, &g, &full_outer(), (100, 45, 1)).unwrap();
        assert_eq!(plan.layers.len(), 6);
        assert_eq!(
            plan.layers
                .iter()
                .filter(|l| l.kind == LayerKind::Conv)
                .count(),
            4
        );
        assert_eq!(plan.learning.algorithm, LearnAlgo::Adam);
        assert_eq!(plan.learning.lr(), 0.0001);
        assert_eq!(plan.learning.hyper("beta1"), 0.75192);
        assert_eq!(plan.learning.hyper("beta2"), 0.91021);
        assert_eq!(plan.learning.decay(), 0.00047);
        assert_eq!(plan.learning.batch_size, 98);
        check_valid(&plan).unwrap();
    }

    #[test]
    fn aliased_unit_appears_twice_identically() {
        let g = fig_grammar();
        let drop = unit(0, "classification", vec![
            gene("classification", 1, &[]),
            gene("dropout", 0, &[&[0.3]]),
        ]);
        let genotype = Genotype::new(
            vec![
                vec![Slot::Owned(conv_unit(1, 32.0, 3.0, 1.0, 0, 1))],
                vec![
                    Slot::Owned(drop),
                    Slot::Alias(0),
                    Slot::Owned(fc_unit(2, 1, 128.0, 0)),
                ],
                vec![Slot::Owned(softmax_unit(3))],
                vec![Slot::Owned(adam_learning_unit(4, 0.001, 0.9, 0.99, 0.0, 50.0))],
            ],
            1,
        );
        let plan = build_plan(&genotype, &g, &full_outer(), (24, 24, 1)).unwrap();
        assert_eq!(plan.layers[1], plan.layers[2]);
        assert_eq!(plan.layers[1].kind, LayerKind::Dropout);
    }

    #[test]
    fn same_padding_preserves_spatial_dims() {
        let g = fig_grammar();
        let mut genotype = minimal_genotype();
        genotype.blocks[0] = vec![Slot::Owned(conv_unit(0, 32.0, 3.0, 1.0, 0, 1))];
        let plan = build_plan(&genotype, &g, &full_outer(), (100, 45, 1)).unwrap();
        check_valid(&plan).unwrap();
        // shape probe: conv same k3 s1 on 100x45 keeps 100x45
        assert_eq!(spatial_out(100, 45, 3, 1, Padding::Same).unwrap(), (100, 45));
    }

    #[test]
    fn oversized_valid_kernel_is_invalid() {
        let err = spatial_out(4, 4, 5, 1, Padding::Valid).unwrap_err();
        assert!(err.contains("kernel 5 exceeds input"));
    }

    #[test]
    fn pool_chain_shape_oracle() {
        // hand-propagated: valid k=2 s=2 halves via floor((d-2)/2)+1
        let mut dims = (100usize, 45usize);
        let expected_w = [22, 11, 5, 2, 1];
        for (i, &w) in expected_w.iter().enumerate() {
            dims = spatial_out(dims.0, dims.1, 2, 2, Padding::Valid)
                .unwrap_or_else(|e| panic!("pool {i} unexpectedly invalid: {e}"));
            assert_eq!(dims.1, w, "after pool {}", i + 1);
        }
        // sixth pool: kernel 2 exceeds width 1
        assert!(spatial_out(dims.0, dims.1, 2, 2, Padding::Valid).is_err());
    }

    #[test]
    fn six_valid_pools_make_plan_invalid() {
        let g = fig_grammar();
        let pool = |id: u32| {
            unit(
                id,
                "features",
                vec![
                    gene("features", 2, &[]),
                    gene("pooling", 0, &[&[2.0], &[2.0]]),
                    gene("pool-type", 0, &[]),
                    gene("padding", 1, &[]),
                ],
            )
        };
        let genotype = Genotype::new(
            vec![
                (0..6u32).map(|i| Slot::Owned(pool(i))).collect(),
                vec![Slot::Owned(fc_unit(6, 1, 128.0, 0))],
                vec![Slot::Owned(softmax_unit(7))],
                vec![Slot::Owned(adam_learning_unit(8, 0.001, 0.9, 0.99, 0.0, 50.0))],
            ],
            1,
        );
        let plan = build_plan(&genotype, &g, &full_outer(), (100, 45, 1)).unwrap();
        assert!(check_valid(&plan).is_err());
    }

    #[test]
    fn derivation_is_deterministic() {
        let g = fig_grammar();
        let outer = full_outer();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genotype = random_genotype(&g, &outer, &mut rng).unwrap();
            let a = plan_lines(&genotype, &g).unwrap();
            let b = plan_lines(&genotype, &g).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn every_emitted_key_is_consumed() {
        // random genotypes must decode with no unknown-attribute errors
        let g = fig_grammar();
        let outer = full_outer();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genotype = random_genotype(&g, &outer, &mut rng).unwrap();
            build_plan(&genotype, &g, &outer, (24, 24, 1))
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn layer_count_within_search_space_bounds() {
        let g = fig_grammar();
        let outer = full_outer();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let genotype = random_genotype(&g, &outer, &mut rng).unwrap();
            let plan = build_plan(&genotype, &g, &outer, (24, 24, 1)).unwrap();
            assert!((3..=41).contains(&plan.layers.len()));
        }
    }
}
