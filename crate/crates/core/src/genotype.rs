//! Two-level individual representation.
//!
//! The outer level is a list of blocks mirroring the outer structure, each
//! holding unit slots; a slot either owns a unit or aliases another owned
//! unit in the same block (duplication by reference: edits to the owner show
//! through every alias). The inner level is one gene per nonterminal
//! expansion, in depth-first derivation order, so the genotype carries no
//! non-coding material and grows exactly as the derivation requires.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::grammar::{Alternative, Grammar, OuterStructure, ParamBlock, ParamKind, Symbol};
use crate::metrics::{EvalRecord, Fitness};

/// Expansions of one nonterminal allowed within a single unit derivation
/// before sampling aborts (guards against runaway recursive grammars).
pub const DERIVATION_DEPTH_LIMIT: usize = 50;

#[derive(Debug, Error)]
pub enum GenotypeError {
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("derivation exceeded {limit} expansions of `{rule}`")]
    RecursionLimit { rule: String, limit: usize },
    #[error("derivation incomplete: ran out of genes expanding `{0}`")]
    Incomplete(String),
    #[error("gene {index} expands `{found}` where `{expected}` was required")]
    RuleMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("gene {index} ({rule}): choice {choice} out of range ({alternatives} alternatives)")]
    ChoiceOutOfRange {
        index: usize,
        rule: String,
        choice: usize,
        alternatives: usize,
    },
    #[error("gene {index} ({rule}): {reason}")]
    BadParams {
        index: usize,
        rule: String,
        reason: String,
    },
    #[error("unit {unit_id}: {0} trailing genes after complete derivation", .extra)]
    TrailingGenes { unit_id: u32, extra: usize },
    #[error("alias references unknown unit id {0}")]
    DanglingAlias(u32),
    #[error("block {block} has {count} slots outside [{min},{max}]")]
    BlockBounds {
        block: usize,
        count: usize,
        min: usize,
        max: usize,
    },
    #[error("genotype has {found} blocks, outer structure has {expected}")]
    BlockCount { found: usize, expected: usize },
    #[error("train_time_units must be >= 1")]
    ZeroTrainTime,
    #[error("serialization: {0}")]
    Serial(String),
}

/// One expansion decision: which alternative of `nonterminal` was taken and
/// the values drawn for its parameter blocks (one group per block).
#[derive(Debug, Clone, PartialEq)]
pub struct DsgeGene {
    pub nonterminal: String,
    pub choice: usize,
    pub params: Vec<Vec<f64>>,
}

/// A complete derivation from `start`, genes in depth-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvoUnit {
    pub unit_id: u32,
    pub start: String,
    pub genes: Vec<DsgeGene>,
}

/// A block position: either an owned unit or an alias to one in the block.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Owned(EvoUnit),
    Alias(u32),
}

impl Slot {
    pub fn owned(&self) -> Option<&EvoUnit> {
        match self {
            Slot::Owned(u) => Some(u),
            Slot::Alias(_) => None,
        }
    }
}

/// Outer-level genotype plus the training-time multiplier.
#[derive(Debug, Clone)]
pub struct Genotype {
    pub blocks: Vec<Vec<Slot>>,
    pub train_time_units: u32,
    next_unit_id: u32,
}

impl PartialEq for Genotype {
    // id-allocation state is bookkeeping, not genetic content
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks && self.train_time_units == other.train_time_units
    }
}

/// A genotype plus everything evaluation attached to it.
#[derive(Debug, Clone)]
pub struct Individual {
    pub genotype: Genotype,
    pub fitness: Option<Fitness>,
    pub metrics: Option<EvalRecord>,
    /// Handle (path) to persisted trained weights, when any were kept.
    pub model_ref: Option<String>,
}

impl Individual {
    pub fn new(genotype: Genotype) -> Self {
        Individual {
            genotype,
            fitness: None,
            metrics: None,
            model_ref: None,
        }
    }
}

impl Genotype {
    pub fn new(blocks: Vec<Vec<Slot>>, train_time_units: u32) -> Self {
        let next = blocks
            .iter()
            .flatten()
            .filter_map(|s| s.owned().map(|u| u.unit_id + 1))
            .max()
            .unwrap_or(0);
        Genotype {
            blocks,
            train_time_units,
            next_unit_id: next,
        }
    }

    pub fn fresh_unit_id(&mut self) -> u32 {
        let id = self.next_unit_id;
        self.next_unit_id += 1;
        id
    }

    pub fn total_slots(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Find an owned unit by id anywhere in the genotype.
    pub fn find_unit(&self, id: u32) -> Option<&EvoUnit> {
        self.blocks
            .iter()
            .flatten()
            .filter_map(Slot::owned)
            .find(|u| u.unit_id == id)
    }

    pub fn find_unit_mut(&mut self, id: u32) -> Option<&mut EvoUnit> {
        self.blocks
            .iter_mut()
            .flatten()
            .filter_map(|s| match s {
                Slot::Owned(u) => Some(u),
                Slot::Alias(_) => None,
            })
            .find(|u| u.unit_id == id)
    }

    /// Flatten to derivation order with aliases replaced by their targets.
    pub fn resolve(&self) -> Result<Vec<&EvoUnit>, GenotypeError> {
        let mut owned: HashMap<u32, &EvoUnit> = HashMap::new();
        for slot in self.blocks.iter().flatten() {
            if let Slot::Owned(u) = slot {
                owned.insert(u.unit_id, u);
            }
        }
        let mut out = Vec::with_capacity(self.total_slots());
        for slot in self.blocks.iter().flatten() {
            match slot {
                Slot::Owned(u) => out.push(u),
                Slot::Alias(id) => {
                    out.push(*owned.get(id).ok_or(GenotypeError::DanglingAlias(*id))?)
                }
            }
        }
        Ok(out)
    }

    /// Like `resolve` but per block.
    pub fn resolve_blocks(&self) -> Result<Vec<Vec<&EvoUnit>>, GenotypeError> {
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut units = Vec::with_capacity(block.len());
            for slot in block {
                match slot {
                    Slot::Owned(u) => units.push(u),
                    Slot::Alias(id) => units.push(
                        block
                            .iter()
                            .filter_map(Slot::owned)
                            .find(|u| u.unit_id == *id)
                            .ok_or(GenotypeError::DanglingAlias(*id))?,
                    ),
                }
            }
            out.push(units);
        }
        Ok(out)
    }
}

/// Draw one value for a parameter block.
pub fn sample_param(block: &ParamBlock, rng: &mut impl Rng) -> f64 {
    match block.kind {
        ParamKind::Int => rng.random_range(block.min as i64..=block.max as i64) as f64,
        _ => rng.random_range(block.min..=block.max),
    }
}

/// Draw all value groups for an alternative's parameter blocks.
pub fn sample_params(alt: &Alternative, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    alt.param_blocks()
        .map(|block| (0..block.count).map(|_| sample_param(block, rng)).collect())
        .collect()
}

/// Sample a complete random derivation of `start`.
pub fn random_unit(
    grammar: &Grammar,
    start: &str,
    rng: &mut impl Rng,
) -> Result<EvoUnit, GenotypeError> {
    let mut genes = Vec::new();
    let mut depth: HashMap<String, usize> = HashMap::new();
    expand_random(grammar, start, rng, &mut genes, &mut depth)?;
    Ok(EvoUnit {
        unit_id: 0,
        start: start.to_string(),
        genes,
    })
}

fn expand_random(
    grammar: &Grammar,
    nt: &str,
    rng: &mut impl Rng,
    genes: &mut Vec<DsgeGene>,
    depth: &mut HashMap<String, usize>,
) -> Result<(), GenotypeError> {
    let count = depth.entry(nt.to_string()).or_insert(0);
    *count += 1;
    if *count > DERIVATION_DEPTH_LIMIT {
        return Err(GenotypeError::RecursionLimit {
            rule: nt.to_string(),
            limit: DERIVATION_DEPTH_LIMIT,
        });
    }
    let alts = grammar
        .rule(nt)
        .ok_or_else(|| GenotypeError::UnknownRule(nt.to_string()))?;
    let choice = rng.random_range(0..alts.len());
    let alt = &alts[choice];
    genes.push(DsgeGene {
        nonterminal: nt.to_string(),
        choice,
        params: sample_params(alt, rng),
    });
    for sym in &alt.symbols {
        if let Symbol::Nonterminal(child) = sym {
            expand_random(grammar, child, rng, genes, depth)?;
        }
    }
    Ok(())
}

/// Sample a full genotype: per block a uniform slot count within bounds,
/// every slot owned, training budget at one unit.
pub fn random_genotype(
    grammar: &Grammar,
    outer: &OuterStructure,
    rng: &mut impl Rng,
) -> Result<Genotype, GenotypeError> {
    let mut genotype = Genotype::new(Vec::new(), 1);
    let mut blocks = Vec::with_capacity(outer.blocks.len());
    for outer_block in &outer.blocks {
        let count = rng.random_range(outer_block.min_units..=outer_block.max_units);
        let mut slots = Vec::with_capacity(count);
        for _ in 0..count {
            let mut unit = random_unit(grammar, &outer_block.rule, rng)?;
            unit.unit_id = genotype.fresh_unit_id();
            slots.push(Slot::Owned(unit));
        }
        blocks.push(slots);
    }
    genotype.blocks = blocks;
    Ok(genotype)
}

/// Re-derive a unit's genes against the grammar, checking completeness,
/// choice ranges, and parameter bounds. Returns the number of genes consumed.
pub fn check_unit(grammar: &Grammar, unit: &EvoUnit) -> Result<usize, GenotypeError> {
    let mut pos = 0;
    expand_check(grammar, &unit.start, &unit.genes, &mut pos)?;
    if pos != unit.genes.len() {
        return Err(GenotypeError::TrailingGenes {
            unit_id: unit.unit_id,
            extra: unit.genes.len() - pos,
        });
    }
    Ok(pos)
}

fn expand_check(
    grammar: &Grammar,
    nt: &str,
    genes: &[DsgeGene],
    pos: &mut usize,
) -> Result<(), GenotypeError> {
    let index = *pos;
    let gene = genes
        .get(index)
        .ok_or_else(|| GenotypeError::Incomplete(nt.to_string()))?;
    if gene.nonterminal != nt {
        return Err(GenotypeError::RuleMismatch {
            index,
            expected: nt.to_string(),
            found: gene.nonterminal.clone(),
        });
    }
    let alts = grammar
        .rule(nt)
        .ok_or_else(|| GenotypeError::UnknownRule(nt.to_string()))?;
    let alt = alts.get(gene.choice).ok_or(GenotypeError::ChoiceOutOfRange {
        index,
        rule: nt.to_string(),
        choice: gene.choice,
        alternatives: alts.len(),
    })?;
    let blocks: Vec<&ParamBlock> = alt.param_blocks().collect();
    if blocks.len() != gene.params.len() {
        return Err(GenotypeError::BadParams {
            index,
            rule: nt.to_string(),
            reason: format!(
                "{} param groups, alternative has {} blocks",
                gene.params.len(),
                blocks.len()
            ),
        });
    }
    for (block, group) in blocks.iter().zip(&gene.params) {
        if group.len() != block.count {
            return Err(GenotypeError::BadParams {
                index,
                rule: nt.to_string(),
                reason: format!(
                    "block `{}` expects {} values, found {}",
                    block.name,
                    block.count,
                    group.len()
                ),
            });
        }
        for &v in group {
            if v < block.min || v > block.max {
                return Err(GenotypeError::BadParams {
                    index,
                    rule: nt.to_string(),
                    reason: format!("`{}` value {v} outside [{}, {}]", block.name, block.min, block.max),
                });
            }
            if block.kind == ParamKind::Int && v.fract() != 0.0 {
                return Err(GenotypeError::BadParams {
                    index,
                    rule: nt.to_string(),
                    reason: format!("`{}` value {v} not integral", block.name),
                });
            }
        }
    }
    *pos += 1;
    for sym in &alt.symbols {
        if let Symbol::Nonterminal(child) = sym {
            expand_check(grammar, child, genes, pos)?;
        }
    }
    Ok(())
}

/// Full structural validity: block shape, unit completeness, alias integrity.
pub fn check_genotype(
    genotype: &Genotype,
    grammar: &Grammar,
    outer: &OuterStructure,
) -> Result<(), GenotypeError> {
    if genotype.train_time_units == 0 {
        return Err(GenotypeError::ZeroTrainTime);
    }
    if genotype.blocks.len() != outer.blocks.len() {
        return Err(GenotypeError::BlockCount {
            found: genotype.blocks.len(),
            expected: outer.blocks.len(),
        });
    }
    for (b, (slots, outer_block)) in genotype.blocks.iter().zip(&outer.blocks).enumerate() {
        if slots.len() < outer_block.min_units || slots.len() > outer_block.max_units {
            return Err(GenotypeError::BlockBounds {
                block: b,
                count: slots.len(),
                min: outer_block.min_units,
                max: outer_block.max_units,
            });
        }
        for slot in slots {
            match slot {
                Slot::Owned(unit) => {
                    if unit.start != outer_block.rule {
                        return Err(GenotypeError::RuleMismatch {
                            index: 0,
                            expected: outer_block.rule.clone(),
                            found: unit.start.clone(),
                        });
                    }
                    check_unit(grammar, unit)?;
                }
                Slot::Alias(id) => {
                    // intra-block aliasing only
                    if !slots
                        .iter()
                        .filter_map(Slot::owned)
                        .any(|u| u.unit_id == *id)
                    {
                        return Err(GenotypeError::DanglingAlias(*id));
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text serialization (checkpoint payload)
// ---------------------------------------------------------------------------

const FORMAT_TAG: &str = "GT1";

fn format_value(v: f64) -> String {
    format!("{v:?}")
}

/// Serialize to the versioned line format used inside checkpoints.
pub fn to_text(genotype: &Genotype) -> String {
    let mut out = format!(
        "{FORMAT_TAG} train_time={} next_id={}\n",
        genotype.train_time_units, genotype.next_unit_id
    );
    for (b, slots) in genotype.blocks.iter().enumerate() {
        out.push_str(&format!("B{b} {}\n", slots.len()));
        for slot in slots {
            match slot {
                Slot::Owned(unit) => {
                    out.push_str(&format!("U{} {}\n", unit.unit_id, unit.start));
                    for gene in &unit.genes {
                        let groups: Vec<String> = gene
                            .params
                            .iter()
                            .map(|g| {
                                g.iter()
                                    .map(|v| format_value(*v))
                                    .collect::<Vec<_>>()
                                    .join(",")
                            })
                            .collect();
                        out.push_str(&format!(
                            "G {}/{}/{}\n",
                            gene.nonterminal,
                            gene.choice,
                            groups.join(";")
                        ));
                    }
                }
                Slot::Alias(id) => out.push_str(&format!("A@{id}\n")),
            }
        }
    }
    out
}

/// Parse the serialization produced by [`to_text`].
pub fn from_text(text: &str) -> Result<Genotype, GenotypeError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| GenotypeError::Serial("empty".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FORMAT_TAG) {
        return Err(GenotypeError::Serial(format!(
            "unsupported genotype format `{header}`"
        )));
    }
    let mut train_time = None;
    let mut next_id = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("train_time", v)) => train_time = v.parse().ok(),
            Some(("next_id", v)) => next_id = v.parse().ok(),
            _ => return Err(GenotypeError::Serial(format!("bad header field `{kv}`"))),
        }
    }
    let train_time_units: u32 =
        train_time.ok_or_else(|| GenotypeError::Serial("missing train_time".into()))?;

    let mut blocks: Vec<Vec<Slot>> = Vec::new();
    for line in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('B') {
            let _ = rest; // block index/count are advisory; structure is positional
            blocks.push(Vec::new());
        } else if let Some(rest) = line.strip_prefix("U") {
            let (id, start) = rest
                .split_once(' ')
                .ok_or_else(|| GenotypeError::Serial(format!("bad unit line `{line}`")))?;
            let unit_id = id
                .parse()
                .map_err(|_| GenotypeError::Serial(format!("bad unit id `{id}`")))?;
            blocks
                .last_mut()
                .ok_or_else(|| GenotypeError::Serial("unit before block header".into()))?
                .push(Slot::Owned(EvoUnit {
                    unit_id,
                    start: start.to_string(),
                    genes: Vec::new(),
                }));
        } else if let Some(rest) = line.strip_prefix("A@") {
            let id = rest
                .parse()
                .map_err(|_| GenotypeError::Serial(format!("bad alias id `{rest}`")))?;
            blocks
                .last_mut()
                .ok_or_else(|| GenotypeError::Serial("alias before block header".into()))?
                .push(Slot::Alias(id));
        } else if let Some(rest) = line.strip_prefix("G ") {
            let mut fields = rest.splitn(3, '/');
            let nt = fields
                .next()
                .ok_or_else(|| GenotypeError::Serial("gene missing nonterminal".into()))?;
            let choice: usize = fields
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| GenotypeError::Serial(format!("bad gene line `{line}`")))?;
            let raw_params = fields.next().unwrap_or("");
            let params = if raw_params.is_empty() {
                Vec::new()
            } else {
                raw_params
                    .split(';')
                    .map(|group| {
                        group
                            .split(',')
                            .map(|v| {
                                v.parse::<f64>().map_err(|_| {
                                    GenotypeError::Serial(format!("bad param `{v}`"))
                                })
                            })
                            .collect::<Result<Vec<f64>, _>>()
                    })
                    .collect::<Result<Vec<Vec<f64>>, _>>()?
            };
            let unit = blocks
                .last_mut()
                .and_then(|b| b.last_mut())
                .and_then(|s| match s {
                    Slot::Owned(u) => Some(u),
                    Slot::Alias(_) => None,
                })
                .ok_or_else(|| GenotypeError::Serial("gene outside unit".into()))?;
            unit.genes.push(DsgeGene {
                nonterminal: nt.to_string(),
                choice,
                params,
            });
        } else {
            return Err(GenotypeError::Serial(format!("unrecognized line `{line}`")));
        }
    }

    let mut genotype = Genotype::new(blocks, train_time_units);
    if let Some(next) = next_id {
        genotype.next_unit_id = genotype.next_unit_id.max(next);
    }
    Ok(genotype)
}
