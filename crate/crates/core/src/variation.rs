//! Genetic operators over genotypes: unit addition, duplication by
//! reference, removal, inner-level perturbation, train-time mutation, and a
//! unit-swap crossover kept for population-based compatibility.
//!
//! Every operator maps valid genotypes to valid genotypes. `mutate` fires
//! each operator independently with its configured probability and forces a
//! single inner-level perturbation when nothing fired, so offspring always
//! differ from their parent.

use std::collections::{HashMap, VecDeque};

use rand::Rng;

use crate::genotype::{
    random_unit, sample_param, sample_params, DsgeGene, EvoUnit, Genotype, GenotypeError, Slot,
};
use crate::grammar::{Grammar, OuterStructure, Symbol};

/// Independent firing probability of each operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationRates {
    pub add: f64,
    pub duplicate: f64,
    pub remove: f64,
    pub dsge: f64,
    pub train_time: f64,
}

impl Default for VariationRates {
    fn default() -> Self {
        VariationRates {
            add: 0.25,
            duplicate: 0.15,
            remove: 0.25,
            dsge: 0.15,
            train_time: 0.20,
        }
    }
}

impl VariationRates {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("add_rate", self.add),
            ("duplicate_rate", self.duplicate),
            ("remove_rate", self.remove),
            ("dsge_rate", self.dsge),
            ("train_time_rate", self.train_time),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} outside [0,1]"));
            }
        }
        Ok(())
    }
}

/// Which operators a `mutate` call applied (used by rate-calibration tests).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FiredOps {
    pub add: bool,
    pub duplicate: bool,
    pub remove: bool,
    pub dsge: bool,
    pub train_time: bool,
    pub forced_dsge: bool,
}

/// Insert one fresh random unit into a uniformly chosen block with spare
/// capacity, at a uniform position. Identity when every block is full.
pub fn mutate_add(
    genotype: &mut Genotype,
    grammar: &Grammar,
    outer: &OuterStructure,
    rng: &mut impl Rng,
) -> Result<(), GenotypeError> {
    let eligible: Vec<usize> = genotype
        .blocks
        .iter()
        .zip(&outer.blocks)
        .enumerate()
        .filter(|(_, (slots, ob))| slots.len() < ob.max_units)
        .map(|(i, _)| i)
        .collect();
    let Some(&block_idx) = pick(&eligible, rng) else {
        return Ok(());
    };
    let mut unit = random_unit(grammar, &outer.blocks[block_idx].rule, rng)?;
    unit.unit_id = genotype.fresh_unit_id();
    let pos = rng.random_range(0..=genotype.blocks[block_idx].len());
    genotype.blocks[block_idx].insert(pos, Slot::Owned(unit));
    Ok(())
}

/// Alias a uniformly chosen owned unit into its own block at a uniform
/// position. Identity when no block with an owned unit has capacity.
pub fn mutate_duplicate(genotype: &mut Genotype, outer: &OuterStructure, rng: &mut impl Rng) {
    let mut candidates: Vec<(usize, u32)> = Vec::new();
    for (b, (slots, ob)) in genotype.blocks.iter().zip(&outer.blocks).enumerate() {
        if slots.len() >= ob.max_units {
            continue;
        }
        for slot in slots {
            if let Slot::Owned(u) = slot {
                candidates.push((b, u.unit_id));
            }
        }
    }
    let Some(&(block_idx, unit_id)) = pick(&candidates, rng) else {
        return;
    };
    let pos = rng.random_range(0..=genotype.blocks[block_idx].len());
    genotype.blocks[block_idx].insert(pos, Slot::Alias(unit_id));
}

/// Delete a uniformly chosen slot from the blocks above their minimum.
/// Removing an owner promotes its first alias to owned, preserving every
/// remaining copy. Identity when nothing is removable.
pub fn mutate_remove(genotype: &mut Genotype, outer: &OuterStructure, rng: &mut impl Rng) {
    let mut removable: Vec<(usize, usize)> = Vec::new();
    for (b, (slots, ob)) in genotype.blocks.iter().zip(&outer.blocks).enumerate() {
        if slots.len() > ob.min_units {
            for s in 0..slots.len() {
                removable.push((b, s));
            }
        }
    }
    let Some(&(block_idx, slot_idx)) = pick(&removable, rng) else {
        return;
    };
    let removed = genotype.blocks[block_idx].remove(slot_idx);
    if let Slot::Owned(unit) = removed {
        let block = &mut genotype.blocks[block_idx];
        if let Some(alias_pos) = block
            .iter()
            .position(|s| matches!(s, Slot::Alias(id) if *id == unit.unit_id))
        {
            block[alias_pos] = Slot::Owned(unit);
        }
    }
}

/// Increase the training budget multiplier by one.
pub fn mutate_train_time(genotype: &mut Genotype) {
    genotype.train_time_units += 1;
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl Rng) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.random_range(0..items.len())])
    }
}

/// A gene is perturbable when its rule offers more than one alternative or
/// its chosen alternative carries numeric parameters.
fn eligible_genes(grammar: &Grammar, unit: &EvoUnit) -> Vec<usize> {
    unit.genes
        .iter()
        .enumerate()
        .filter(|(_, gene)| {
            let alts = grammar.rule(&gene.nonterminal).map_or(0, <[_]>::len);
            alts > 1 || !gene.params.is_empty()
        })
        .map(|(i, _)| i)
        .collect()
}

/// Perturb one uniformly chosen gene of one uniformly chosen owned unit:
/// a fair coin picks between resampling the expansion choice (re-deriving
/// the subtree underneath, reusing still-reachable genes) and resampling a
/// single numeric parameter within its range.
pub fn mutate_dsge(
    genotype: &mut Genotype,
    grammar: &Grammar,
    rng: &mut impl Rng,
) -> Result<(), GenotypeError> {
    let mut units: Vec<u32> = Vec::new();
    for slot in genotype.blocks.iter().flatten() {
        if let Slot::Owned(u) = slot {
            if !eligible_genes(grammar, u).is_empty() {
                units.push(u.unit_id);
            }
        }
    }
    let Some(&unit_id) = pick(&units, rng) else {
        return Ok(());
    };
    let unit = genotype
        .find_unit_mut(unit_id)
        .expect("candidate id came from the genotype");
    let genes = eligible_genes(grammar, unit);
    let gene_idx = *pick(&genes, rng).expect("unit has eligible genes");

    let alts = grammar
        .rule(&unit.genes[gene_idx].nonterminal)
        .expect("gene rule exists");
    let can_choose = alts.len() > 1;
    let can_param = !unit.genes[gene_idx].params.is_empty();
    let pick_choice = match (can_choose, can_param) {
        (true, true) => rng.random_bool(0.5),
        (true, false) => true,
        (false, true) => false,
        (false, false) => unreachable!("gene would not be eligible"),
    };

    if pick_choice {
        let new_choice = rng.random_range(0..alts.len());
        rederive_with_choice(grammar, unit, gene_idx, new_choice, rng)?;
    } else {
        resample_one_param(grammar, unit, gene_idx, rng);
    }
    Ok(())
}

fn resample_one_param(grammar: &Grammar, unit: &mut EvoUnit, gene_idx: usize, rng: &mut impl Rng) {
    let gene = &mut unit.genes[gene_idx];
    let alt = &grammar.rule(&gene.nonterminal).unwrap()[gene.choice];
    let blocks: Vec<_> = alt.param_blocks().collect();
    let flat: Vec<(usize, usize)> = gene
        .params
        .iter()
        .enumerate()
        .flat_map(|(g, group)| (0..group.len()).map(move |v| (g, v)))
        .collect();
    let &(g, v) = pick(&flat, rng).expect("params non-empty");
    gene.params[g][v] = sample_param(blocks[g], rng);
}

/// Re-derive `unit` with `new_choice` at gene `gene_idx`, reusing old genes
/// wherever the new derivation still reaches their nonterminal (FIFO per
/// nonterminal). Parameters of the mutated gene survive when the new
/// alternative declares identical blocks at the same positions.
fn rederive_with_choice(
    grammar: &Grammar,
    unit: &mut EvoUnit,
    gene_idx: usize,
    new_choice: usize,
    rng: &mut impl Rng,
) -> Result<(), GenotypeError> {
    let mut queues: HashMap<&str, VecDeque<(usize, &DsgeGene)>> = HashMap::new();
    let old_genes = unit.genes.clone();
    for (i, gene) in old_genes.iter().enumerate() {
        queues
            .entry(gene.nonterminal.as_str())
            .or_default()
            .push_back((i, gene));
    }

    fn expand<'g>(
        grammar: &'g Grammar,
        nt: &str,
        queues: &mut HashMap<&str, VecDeque<(usize, &DsgeGene)>>,
        target: usize,
        new_choice: usize,
        out: &mut Vec<DsgeGene>,
        rng: &mut impl Rng,
        depth: &mut usize,
    ) -> Result<(), GenotypeError> {
        *depth += 1;
        if *depth > 10_000 {
            return Err(GenotypeError::RecursionLimit {
                rule: nt.to_string(),
                limit: 10_000,
            });
        }
        let alts = grammar
            .rule(nt)
            .ok_or_else(|| GenotypeError::UnknownRule(nt.to_string()))?;
        let reused = queues.get_mut(nt).and_then(VecDeque::pop_front);
        let (choice, old_gene) = match reused {
            Some((orig_idx, gene)) if orig_idx == target => (new_choice, Some(gene)),
            Some((_, gene)) if gene.choice < alts.len() => (gene.choice, Some(gene)),
            _ => (rng.random_range(0..alts.len()), None),
        };
        let alt = &alts[choice];
        // retain old parameter groups where the block layout agrees
        let fresh = sample_params(alt, rng);
        let params: Vec<Vec<f64>> = match old_gene {
            Some(old) => {
                let old_alt = &alts[old.choice.min(alts.len() - 1)];
                let old_blocks: Vec<_> = old_alt.param_blocks().collect();
                let new_blocks: Vec<_> = alt.param_blocks().collect();
                new_blocks
                    .iter()
                    .enumerate()
                    .map(|(i, block)| {
                        if old.choice == choice
                            || (old_blocks.get(i).is_some_and(|ob| *ob == *block)
                                && old.params.get(i).is_some_and(|g| g.len() == block.count))
                        {
                            old.params.get(i).cloned().unwrap_or_else(|| fresh[i].clone())
                        } else {
                            fresh[i].clone()
                        }
                    })
                    .collect()
            }
            None => fresh,
        };
        out.push(DsgeGene {
            nonterminal: nt.to_string(),
            choice,
            params,
        });
        for sym in &alt.symbols {
            if let Symbol::Nonterminal(child) = sym {
                expand(grammar, child, queues, target, new_choice, out, rng, depth)?;
            }
        }
        Ok(())
    }

    let mut new_genes = Vec::with_capacity(old_genes.len());
    let mut depth = 0;
    expand(
        grammar,
        &unit.start.clone(),
        &mut queues,
        gene_idx,
        new_choice,
        &mut new_genes,
        rng,
        &mut depth,
    )?;
    unit.genes = new_genes;
    Ok(())
}

/// Produce one offspring genotype from a parent.
///
/// Each operator fires independently with its configured rate; when none
/// fired (or their effects cancelled out), inner-level perturbations are
/// applied until the offspring differs from the parent.
pub fn mutate(
    parent: &Genotype,
    rates: &VariationRates,
    grammar: &Grammar,
    outer: &OuterStructure,
    rng: &mut impl Rng,
) -> Result<Genotype, GenotypeError> {
    Ok(mutate_traced(parent, rates, grammar, outer, rng)?.0)
}

/// [`mutate`] variant that also reports which operators fired.
pub fn mutate_traced(
    parent: &Genotype,
    rates: &VariationRates,
    grammar: &Grammar,
    outer: &OuterStructure,
    rng: &mut impl Rng,
) -> Result<(Genotype, FiredOps), GenotypeError> {
    let mut offspring = parent.clone();
    let mut fired = FiredOps::default();

    fired.add = rng.random_bool(rates.add);
    fired.duplicate = rng.random_bool(rates.duplicate);
    fired.remove = rng.random_bool(rates.remove);
    fired.dsge = rng.random_bool(rates.dsge);
    fired.train_time = rng.random_bool(rates.train_time);

    if fired.add {
        mutate_add(&mut offspring, grammar, outer, rng)?;
    }
    if fired.duplicate {
        mutate_duplicate(&mut offspring, outer, rng);
    }
    if fired.remove {
        mutate_remove(&mut offspring, outer, rng);
    }
    if fired.dsge {
        mutate_dsge(&mut offspring, grammar, rng)?;
    }
    if fired.train_time {
        mutate_train_time(&mut offspring);
    }

    // offspring identical to the parent waste evaluations
    let mut guard = 0;
    while offspring == *parent {
        fired.forced_dsge = true;
        mutate_dsge(&mut offspring, grammar, rng)?;
        guard += 1;
        if guard > 1000 {
            break; // degenerate search space with a single phenotype
        }
    }
    Ok((offspring, fired))
}

/// Swap a slot span of one uniformly chosen block between two genotypes.
///
/// The span is drawn within the shorter of the two blocks so both parents
/// exchange the same positions; aliases whose owner ends up on the other
/// side of the cut are materialized into owned copies. Spans are redrawn
/// (at most 20 times, then identity) if a result would violate the outer
/// bounds.
pub fn crossover(
    a: &Genotype,
    b: &Genotype,
    outer: &OuterStructure,
    rng: &mut impl Rng,
) -> Result<(Genotype, Genotype), GenotypeError> {
    let block_idx = rng.random_range(0..outer.blocks.len().min(a.blocks.len()));
    let limit = a.blocks[block_idx].len().min(b.blocks[block_idx].len());
    if limit == 0 {
        return Ok((a.clone(), b.clone()));
    }
    let ob = &outer.blocks[block_idx];
    for _ in 0..20 {
        let start = rng.random_range(0..limit);
        let len = rng.random_range(1..=limit - start);
        // equal-length exchange keeps block sizes, so bounds always hold;
        // the check guards future span schemes
        if a.blocks[block_idx].len() < ob.min_units || a.blocks[block_idx].len() > ob.max_units {
            continue;
        }
        let span_a = extract_span(a, block_idx, start, len)?;
        let span_b = extract_span(b, block_idx, start, len)?;
        let mut new_a = remove_span(a, block_idx, start, len);
        let mut new_b = remove_span(b, block_idx, start, len);
        insert_span(&mut new_a, block_idx, start, span_b);
        insert_span(&mut new_b, block_idx, start, span_a);
        return Ok((new_a, new_b));
    }
    Ok((a.clone(), b.clone()))
}

/// Materialized span content: owned units plus intra-span alias structure
/// (alias indices point into the span itself).
enum SpanSlot {
    Unit(EvoUnit),
    AliasTo(usize),
}

fn extract_span(
    genotype: &Genotype,
    block_idx: usize,
    start: usize,
    len: usize,
) -> Result<Vec<SpanSlot>, GenotypeError> {
    let block = &genotype.blocks[block_idx];
    let mut out = Vec::with_capacity(len);
    let mut owner_pos: HashMap<u32, usize> = HashMap::new();
    for (offset, slot) in block[start..start + len].iter().enumerate() {
        match slot {
            Slot::Owned(u) => {
                owner_pos.insert(u.unit_id, offset);
                out.push(SpanSlot::Unit(u.clone()));
            }
            Slot::Alias(id) => match owner_pos.get(id) {
                // owner travels with the span: keep the sharing
                Some(&pos) => out.push(SpanSlot::AliasTo(pos)),
                // owner stays behind: materialize the alias
                None => {
                    let owner = block
                        .iter()
                        .filter_map(Slot::owned)
                        .find(|u| u.unit_id == *id)
                        .ok_or(GenotypeError::DanglingAlias(*id))?;
                    out.push(SpanSlot::Unit(owner.clone()));
                }
            },
        }
    }
    Ok(out)
}

fn remove_span(genotype: &Genotype, block_idx: usize, start: usize, len: usize) -> Genotype {
    let mut out = genotype.clone();
    let removed: Vec<Slot> = out.blocks[block_idx].drain(start..start + len).collect();
    // aliases left behind whose owner was inside the span get promoted
    for slot in removed {
        if let Slot::Owned(unit) = slot {
            let block = &mut out.blocks[block_idx];
            if let Some(pos) = block
                .iter()
                .position(|s| matches!(s, Slot::Alias(id) if *id == unit.unit_id))
            {
                block[pos] = Slot::Owned(unit);
            }
        }
    }
    out
}

fn insert_span(genotype: &mut Genotype, block_idx: usize, start: usize, span: Vec<SpanSlot>) {
    let mut new_ids: Vec<u32> = Vec::with_capacity(span.len());
    let mut slots: Vec<Slot> = Vec::with_capacity(span.len());
    for span_slot in span {
        match span_slot {
            SpanSlot::Unit(mut unit) => {
                let id = genotype.fresh_unit_id();
                unit.unit_id = id;
                new_ids.push(id);
                slots.push(Slot::Owned(unit));
            }
            SpanSlot::AliasTo(pos) => {
                let id = new_ids[pos];
                new_ids.push(id);
                slots.push(Slot::Alias(id));
            }
        }
    }
    // clamp: the donor block may have been shorter than this one
    let at = start.min(genotype.blocks[block_idx].len());
    for (offset, slot) in slots.into_iter().enumerate() {
        genotype.blocks[block_idx].insert(at + offset, slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{check_genotype, random_genotype};
    use crate::grammar::{parse_grammar, parse_outer, DEFAULT_GRAMMAR};
    use crate::phenotype::derive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fig_grammar() -> Grammar {
        parse_grammar(DEFAULT_GRAMMAR).unwrap()
    }

    fn full_outer() -> OuterStructure {
        parse_outer("[(features,1,30),(classification,1,10),(softmax,1,1),(learning,1,1)]")
            .unwrap()
    }

    fn sample(seed: u64) -> (Grammar, OuterStructure, Genotype) {
        let g = fig_grammar();
        let outer = full_outer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geno = random_genotype(&g, &outer, &mut rng).unwrap();
        (g, outer, geno)
    }

    #[test]
    fn add_grows_an_eligible_block() {
        let (g, outer, mut geno) = sample(1);
        let before: Vec<usize> = geno.blocks.iter().map(Vec::len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        mutate_add(&mut geno, &g, &outer, &mut rng).unwrap();
        let after: Vec<usize> = geno.blocks.iter().map(Vec::len).collect();
        let grew: Vec<usize> = (0..4).filter(|&i| after[i] == before[i] + 1).collect();
        assert_eq!(grew.len(), 1);
        // softmax and learning blocks are always at their max of 1
        assert!(grew[0] < 2, "insertion landed in a full block");
        check_genotype(&geno, &g, &outer).unwrap();
    }

    #[test]
    fn add_into_full_blocks_is_identity() {
        let g = fig_grammar();
        let outer = parse_outer("[(softmax,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
        let before = geno.clone();
        mutate_add(&mut geno, &g, &outer, &mut rng).unwrap();
        assert_eq!(geno, before);
    }

    #[test]
    fn add_only_lands_in_blocks_below_max() {
        let g = fig_grammar();
        let outer = parse_outer("[(features,1,2),(softmax,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
            let feat_full = geno.blocks[0].len() == 2;
            mutate_add(&mut geno, &g, &outer, &mut rng).unwrap();
            assert_eq!(geno.blocks[1].len(), 1, "softmax block must stay at 1");
            if feat_full {
                assert_eq!(geno.blocks[0].len(), 2);
            }
        }
    }

    #[test]
    fn duplicate_inserts_alias_in_same_block() {
        let (g, outer, mut geno) = sample(3);
        let before: usize = geno.total_slots();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        mutate_duplicate(&mut geno, &outer, &mut rng);
        assert_eq!(geno.total_slots(), before + 1);
        check_genotype(&geno, &g, &outer).unwrap();
        let aliases: usize = geno
            .blocks
            .iter()
            .flatten()
            .filter(|s| matches!(s, Slot::Alias(_)))
            .count();
        assert_eq!(aliases, 1);
    }

    #[test]
    fn duplicate_into_full_block_is_identity() {
        let g = fig_grammar();
        let outer = parse_outer("[(softmax,1,1),(learning,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
        let before = geno.clone();
        mutate_duplicate(&mut geno, &outer, &mut rng);
        assert_eq!(geno, before);
    }

    #[test]
    fn duplicate_tracks_later_owner_edits() {
        let g = fig_grammar();
        let outer = parse_outer("[(dropout,1,4)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut geno = Genotype::new(vec![vec![]], 1);
        let mut unit = random_unit(&g, "dropout", &mut rng).unwrap();
        unit.unit_id = geno.fresh_unit_id();
        let owner_id = unit.unit_id;
        geno.blocks[0].push(Slot::Owned(unit));
        mutate_duplicate(&mut geno, &outer, &mut rng);
        geno.find_unit_mut(owner_id).unwrap().genes[0].params[0][0] = 0.123;
        let resolved = geno.resolve().unwrap();
        assert_eq!(resolved.len(), 2);
        assert_eq!(resolved[0].genes[0].params[0][0], 0.123);
        assert_eq!(resolved[1].genes[0].params[0][0], 0.123);
    }

    #[test]
    fn remove_shrinks_a_block_above_min() {
        let g = fig_grammar();
        let outer = parse_outer("[(classification,1,10)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut geno = Genotype::new(vec![vec![]], 1);
        for _ in 0..2 {
            let mut u = random_unit(&g, "classification", &mut rng).unwrap();
            u.unit_id = geno.fresh_unit_id();
            geno.blocks[0].push(Slot::Owned(u));
        }
        mutate_remove(&mut geno, &outer, &mut rng);
        assert_eq!(geno.blocks[0].len(), 1);
        check_genotype(&geno, &g, &outer).unwrap();
    }

    #[test]
    fn remove_at_min_is_identity() {
        let (g, _, _) = sample(0);
        let outer = parse_outer("[(softmax,1,1),(learning,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
        let before = geno.clone();
        mutate_remove(&mut geno, &outer, &mut rng);
        assert_eq!(geno, before);
    }

    #[test]
    fn removing_owner_promotes_first_alias() {
        let g = fig_grammar();
        let outer = parse_outer("[(dropout,1,4)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut geno = Genotype::new(vec![vec![]], 1);
        let mut unit = random_unit(&g, "dropout", &mut rng).unwrap();
        unit.unit_id = geno.fresh_unit_id();
        let owner_id = unit.unit_id;
        let content_before = unit.genes.clone();
        geno.blocks[0] = vec![Slot::Owned(unit), Slot::Alias(owner_id)];

        // force removal of the owner slot specifically
        let removed = geno.blocks[0].remove(0);
        if let Slot::Owned(u) = removed {
            if let Some(pos) = geno.blocks[0]
                .iter()
                .position(|s| matches!(s, Slot::Alias(id) if *id == u.unit_id))
            {
                geno.blocks[0][pos] = Slot::Owned(u);
            }
        }
        let resolved = geno.resolve().unwrap();
        assert_eq!(resolved.len(), 1);
        assert_eq!(resolved[0].genes, content_before);
        check_genotype(&geno, &g, &outer).unwrap();
    }

    #[test]
    fn remove_never_dangles_aliases() {
        let (g, outer, _) = sample(0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
            for _ in 0..3 {
                mutate_duplicate(&mut geno, &outer, &mut rng);
            }
            for _ in 0..4 {
                mutate_remove(&mut geno, &outer, &mut rng);
            }
            check_genotype(&geno, &g, &outer).unwrap();
        }
    }

    #[test]
    fn dsge_keeps_genotype_valid_and_in_range() {
        let (g, outer, mut geno) = sample(19);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            mutate_dsge(&mut geno, &g, &mut rng).unwrap();
            check_genotype(&geno, &g, &outer).unwrap();
        }
    }

    #[test]
    fn dsge_choice_change_on_activation_flips_phenotype() {
        let g = fig_grammar();
        let mut unit = EvoUnit {
            unit_id: 0,
            start: "activation".to_string(),
            genes: vec![DsgeGene {
                nonterminal: "activation".into(),
                choice: 1,
                params: vec![],
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(derive(&unit, &g).unwrap(), "act:relu");
        rederive_with_choice(&g, &mut unit, 0, 0, &mut rng).unwrap();
        assert_eq!(derive(&unit, &g).unwrap(), "act:linear");
    }

    #[test]
    fn dsge_param_resample_stays_in_range() {
        let g = fig_grammar();
        let outer = parse_outer("[(dropout,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut geno = random_genotype(&g, &outer, &mut rng).unwrap();
        for _ in 0..200 {
            mutate_dsge(&mut geno, &g, &mut rng).unwrap();
            let rate = geno.blocks[0][0].owned().unwrap().genes[0].params[0][0];
            assert!((0.0..=0.7).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn learning_choice_change_retains_batch_and_stop() {
        let g = fig_grammar();
        let mut unit = EvoUnit {
            unit_id: 0,
            start: "learning".to_string(),
            genes: vec![
                DsgeGene {
                    nonterminal: "learning".into(),
                    choice: 0,
                    params: vec![vec![260.0]],
                },
                DsgeGene {
                    nonterminal: "bp".into(),
                    choice: 0,
                    params: vec![vec![0.05], vec![0.8], vec![0.0001]],
                },
                DsgeGene {
                    nonterminal: "nesterov".into(),
                    choice: 0,
                    params: vec![],
                },
                DsgeGene {
                    nonterminal: "stop".into(),
                    choice: 0,
                    params: vec![vec![12.0]],
                },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // switch learning from gradient-descent (0) to adam (2)
        rederive_with_choice(&g, &mut unit, 0, 2, &mut rng).unwrap();
        crate::genotype::check_unit(&g, &unit).unwrap();
        assert_eq!(unit.genes[0].choice, 2);
        assert_eq!(unit.genes[0].params, vec![vec![260.0]], "batch retained");
        assert!(unit.genes.iter().any(|g| g.nonterminal == "adam"));
        assert!(unit.genes.iter().all(|g| g.nonterminal != "bp"));
        let stop = unit.genes.iter().find(|g| g.nonterminal == "stop").unwrap();
        assert_eq!(stop.params, vec![vec![12.0]], "stop retained");
    }

    #[test]
    fn train_time_increments() {
        let (_, _, mut geno) = sample(2);
        assert_eq!(geno.train_time_units, 1);
        mutate_train_time(&mut geno);
        assert_eq!(geno.train_time_units, 2);
        for _ in 0..4 {
            mutate_train_time(&mut geno);
        }
        assert_eq!(geno.train_time_units, 6);
    }

    #[test]
    fn only_train_time_touches_the_budget() {
        let (g, outer, geno) = sample(37);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut copy = geno.clone();
        mutate_add(&mut copy, &g, &outer, &mut rng).unwrap();
        mutate_duplicate(&mut copy, &outer, &mut rng);
        mutate_remove(&mut copy, &outer, &mut rng);
        mutate_dsge(&mut copy, &g, &mut rng).unwrap();
        assert_eq!(copy.train_time_units, geno.train_time_units);
    }

    #[test]
    fn zero_rates_force_exactly_one_dsge_change() {
        let (g, outer, geno) = sample(43);
        let rates = VariationRates {
            add: 0.0,
            duplicate: 0.0,
            remove: 0.0,
            dsge: 0.0,
            train_time: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (off, fired) = mutate_traced(&geno, &rates, &g, &outer, &mut rng).unwrap();
        assert!(fired.forced_dsge);
        assert!(!fired.add && !fired.duplicate && !fired.remove && !fired.dsge);
        assert_ne!(off, geno);
        // structure untouched: only inner-level content changed
        let shape = |g: &Genotype| g.blocks.iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(shape(&off), shape(&geno));
        assert_eq!(off.train_time_units, geno.train_time_units);
    }

    #[test]
    fn mutate_never_returns_the_parent() {
        let (g, outer, _) = sample(0);
        let rates = VariationRates::default();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..300 {
            let parent = random_genotype(&g, &outer, &mut rng).unwrap();
            let off = mutate(&parent, &rates, &g, &outer, &mut rng).unwrap();
            assert_ne!(off, parent);
            check_genotype(&off, &g, &outer).unwrap();
        }
    }

    #[test]
    fn firing_rates_match_configuration() {
        let (g, outer, geno) = sample(59);
        let rates = VariationRates::default();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let trials = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..trials {
            let (_, fired) = mutate_traced(&geno, &rates, &g, &outer, &mut rng).unwrap();
            counts[0] += fired.add as usize;
            counts[1] += fired.duplicate as usize;
            counts[2] += fired.remove as usize;
            counts[3] += fired.dsge as usize;
            counts[4] += fired.train_time as usize;
        }
        let expected = [0.25, 0.15, 0.25, 0.15, 0.20];
        for (i, &e) in expected.iter().enumerate() {
            let observed = counts[i] as f64 / trials as f64;
            assert!(
                (observed - e).abs() < 0.02,
                "operator {i}: observed {observed}, expected {e}"
            );
        }
    }

    #[test]
    fn crossover_swaps_single_unit_learning_block() {
        let g = fig_grammar();
        let outer = parse_outer("[(learning,1,1)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let a = random_genotype(&g, &outer, &mut rng).unwrap();
        let b = random_genotype(&g, &outer, &mut rng).unwrap();
        let (ca, cb) = crossover(&a, &b, &outer, &mut rng).unwrap();
        let line = |geno: &Genotype| derive(geno.blocks[0][0].owned().unwrap(), &g).unwrap();
        assert_eq!(line(&ca), line(&b));
        assert_eq!(line(&cb), line(&a));
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let (g, outer, geno) = sample(71);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let (ca, cb) = crossover(&geno, &geno, &outer, &mut rng).unwrap();
        let lines = |x: &Genotype| {
            x.resolve()
                .unwrap()
                .iter()
                .map(|u| derive(u, &g).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(lines(&ca), lines(&geno));
        assert_eq!(lines(&cb), lines(&geno));
    }

    #[test]
    fn crossover_preserves_bounds_and_validity() {
        let (g, outer, _) = sample(0);
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        for _ in 0..1000 {
            let a = random_genotype(&g, &outer, &mut rng).unwrap();
            let b = random_genotype(&g, &outer, &mut rng).unwrap();
            let (ca, cb) = crossover(&a, &b, &outer, &mut rng).unwrap();
            check_genotype(&ca, &g, &outer).unwrap();
            check_genotype(&cb, &g, &outer).unwrap();
        }
    }

    #[test]
    fn crossover_materializes_boundary_aliases() {
        let g = fig_grammar();
        let outer = parse_outer("[(dropout,2,6)]").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..100 {
            let mut a = random_genotype(&g, &outer, &mut rng).unwrap();
            let mut b = random_genotype(&g, &outer, &mut rng).unwrap();
            for _ in 0..2 {
                mutate_duplicate(&mut a, &outer, &mut rng);
                mutate_duplicate(&mut b, &outer, &mut rng);
            }
            let (ca, cb) = crossover(&a, &b, &outer, &mut rng).unwrap();
            check_genotype(&ca, &g, &outer).unwrap();
            check_genotype(&cb, &g, &outer).unwrap();
            // unit ids stay unique per genotype
            for geno in [&ca, &cb] {
                let mut ids: Vec<u32> = geno
                    .blocks
                    .iter()
                    .flatten()
                    .filter_map(|s| s.owned().map(|u| u.unit_id))
                    .collect();
                let before = ids.len();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), before, "duplicate unit ids");
            }
        }
    }
}
