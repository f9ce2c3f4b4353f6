//! Context-free grammar format for the network search space.
//!
//! A grammar file holds productions of the form
//! `<rule> ::= alt | alt`, where each alternative is a sequence of
//! terminals (`key:value`), nonterminals (`<name>`) and numeric parameter
//! blocks (`[name,kind,count,min,max]`). Alternative order is significant:
//! it defines the expansion indices the genotype encoding refers to.
//! An outer-level structure string `[(rule,min,max),...]` constrains how
//! many units of each rule a network may carry.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// The shipped default grammar (convolutional search space, 2-class softmax).
pub const DEFAULT_GRAMMAR: &str = include_str!("../assets/cnn.grammar");

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("empty grammar source")]
    EmptySource,
    #[error("line {line}: missing '::=' in rule definition")]
    MissingDefine { line: usize },
    #[error("line {line}: malformed rule name `{text}` (expected <name>)")]
    BadRuleName { line: usize, text: String },
    #[error("duplicate rule `{name}`")]
    DuplicateRule { name: String },
    #[error("line {line}: malformed parameter block `{text}`: {reason}")]
    BadParamBlock {
        line: usize,
        text: String,
        reason: String,
    },
    #[error("line {line}: parameter block `{name}` has min {min} > max {max}")]
    ParamMinMax {
        line: usize,
        name: String,
        min: f64,
        max: f64,
    },
    #[error("line {line}: unknown kind token `{kind}` in parameter block")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: terminal `{text}` must contain exactly one ':'")]
    BadTerminal { line: usize, text: String },
    #[error("line {line}: empty alternative")]
    EmptyAlternative { line: usize },
    #[error("line {line}: unterminated `{text}`")]
    Unterminated { line: usize, text: String },
    #[error("malformed outer structure: {0}")]
    BadOuter(String),
    #[error("outer block `{rule}` has min_units {min} > max_units {max}")]
    OuterMinMax { rule: String, min: usize, max: usize },
}

/// Kind of a numeric parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Float,
    /// Closed choices only ever arise from terminal alternatives, never from
    /// bracket blocks; the variant exists so downstream code can classify them.
    Closed,
}

/// A `[name,kind,count,min,max]` block: `count` values drawn from `[min,max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub kind: ParamKind,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

/// One symbol of an alternative.
#[derive(Debug, Clone, PartialEq)]
pub enum Symbol {
    /// `key:value` text emitted verbatim into the phenotype.
    Terminal(String),
    /// Reference to another rule.
    Nonterminal(String),
    /// Numeric parameter block sampled at genotype level.
    Param(ParamBlock),
}

/// One expansion possibility of a rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub symbols: Vec<Symbol>,
}

impl Alternative {
    /// Parameter blocks of this alternative in symbol order.
    pub fn param_blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.symbols.iter().filter_map(|s| match s {
            Symbol::Param(p) => Some(p),
            _ => None,
        })
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().filter_map(|s| match s {
            Symbol::Nonterminal(n) => Some(n.as_str()),
            _ => None,
        })
    }
}

/// Parsed grammar: rules in file order, each with ordered alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    rules: Vec<(String, Vec<Alternative>)>,
    index: HashMap<String, usize>,
}

impl Grammar {
    pub fn rule(&self, name: &str) -> Option<&[Alternative]> {
        self.index.get(name).map(|&i| self.rules[i].1.as_slice())
    }

    pub fn has_rule(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn rule_names(&self) -> impl Iterator<Item = &str> {
        self.rules.iter().map(|(n, _)| n.as_str())
    }

    pub fn rules(&self) -> impl Iterator<Item = (&str, &[Alternative])> {
        self.rules.iter().map(|(n, a)| (n.as_str(), a.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Outer-level structure: ordered `(rule, min_units, max_units)` blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterBlock {
    pub rule: String,
    pub min_units: usize,
    pub max_units: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterStructure {
    pub blocks: Vec<OuterBlock>,
}

/// One token of a rule body, tagged with the line it came from.
enum Token {
    Angle(usize, String),
    Bracket(usize, String),
    Bar(usize),
    Word(usize, String),
}

fn tokenize_body(line_no: usize, body: &str, out: &mut Vec<Token>) -> Result<(), GrammarError> {
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '|' {
            out.push(Token::Bar(line_no));
            i += 1;
        } else if c == '<' {
            let end = chars[i..]
                .iter()
                .position(|&c| c == '>')
                .ok_or(GrammarError::Unterminated {
                    line: line_no,
                    text: "<".into(),
                })?;
            let name: String = chars[i + 1..i + end].iter().collect();
            out.push(Token::Angle(line_no, name));
            i += end + 1;
        } else if c == '[' {
            let end = chars[i..]
                .iter()
                .position(|&c| c == ']')
                .ok_or(GrammarError::Unterminated {
                    line: line_no,
                    text: "[".into(),
                })?;
            let inner: String = chars[i + 1..i + end].iter().collect();
            out.push(Token::Bracket(line_no, inner));
            i += end + 1;
        } else {
            let mut word = String::new();
            while i < chars.len() && !chars[i].is_whitespace() && chars[i] != '|' {
                word.push(chars[i]);
                i += 1;
            }
            out.push(Token::Word(line_no, word));
        }
    }
    Ok(())
}

fn parse_param_block(line: usize, inner: &str) -> Result<ParamBlock, GrammarError> {
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(GrammarError::BadParamBlock {
            line,
            text: format!("[{inner}]"),
            reason: format!("expected 5 fields, found {}", parts.len()),
        });
    }
    let kind = match parts[1] {
        "int" => ParamKind::Int,
        "float" => ParamKind::Float,
        // closed choices are expressed as rule alternatives, not blocks
        other => {
            return Err(GrammarError::UnknownKind {
                line,
                kind: other.to_string(),
            })
        }
    };
    let count: usize = parts[2].parse().map_err(|_| GrammarError::BadParamBlock {
        line,
        text: format!("[{inner}]"),
        reason: format!("non-integer count `{}`", parts[2]),
    })?;
    if count == 0 {
        return Err(GrammarError::BadParamBlock {
            line,
            text: format!("[{inner}]"),
            reason: "count must be >= 1".into(),
        });
    }
    let min: f64 = parts[3].parse().map_err(|_| GrammarError::BadParamBlock {
        line,
        text: format!("[{inner}]"),
        reason: format!("non-numeric min `{}`", parts[3]),
    })?;
    let max: f64 = parts[4].parse().map_err(|_| GrammarError::BadParamBlock {
        line,
        text: format!("[{inner}]"),
        reason: format!("non-numeric max `{}`", parts[4]),
    })?;
    if min > max {
        return Err(GrammarError::ParamMinMax {
            line,
            name: parts[0].to_string(),
            min,
            max,
        });
    }
    if kind == ParamKind::Int && (min.fract() != 0.0 || max.fract() != 0.0) {
        return Err(GrammarError::BadParamBlock {
            line,
            text: format!("[{inner}]"),
            reason: "int block with non-integer bounds".into(),
        });
    }
    Ok(ParamBlock {
        name: parts[0].to_string(),
        kind,
        count,
        min,
        max,
    })
}

fn parse_alternatives(tokens: Vec<Token>) -> Result<Vec<Alternative>, GrammarError> {
    let mut alts = Vec::new();
    let mut current = Vec::new();
    let mut last_line = 1;
    for tok in tokens {
        match tok {
            Token::Bar(line) => {
                if current.is_empty() {
                    return Err(GrammarError::EmptyAlternative { line });
                }
                alts.push(Alternative { symbols: current });
                current = Vec::new();
                last_line = line;
            }
            Token::Angle(line, name) => {
                current.push(Symbol::Nonterminal(name));
                last_line = line;
            }
            Token::Bracket(line, inner) => {
                current.push(Symbol::Param(parse_param_block(line, &inner)?));
                last_line = line;
            }
            Token::Word(line, word) => {
                if word.chars().filter(|&c| c == ':').count() != 1 {
                    return Err(GrammarError::BadTerminal { line, text: word });
                }
                current.push(Symbol::Terminal(word));
                last_line = line;
            }
        }
    }
    if current.is_empty() {
        return Err(GrammarError::EmptyAlternative { line: last_line });
    }
    alts.push(Alternative { symbols: current });
    Ok(alts)
}

/// Parse a grammar source into its rule table.
///
/// Lines without `::=` continue the preceding rule, so an alternative may
/// span several lines. `#` starts a comment line.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let mut rules: Vec<(String, Vec<Token>)> = Vec::new();
    let mut saw_content = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        saw_content = true;
        if let Some(pos) = line.find("::=") {
            let lhs = line[..pos].trim();
            let name = lhs
                .strip_prefix('<')
                .and_then(|s| s.strip_suffix('>'))
                .filter(|s| !s.is_empty() && !s.contains('<') && !s.contains('>'))
                .ok_or_else(|| GrammarError::BadRuleName {
                    line: line_no,
                    text: lhs.to_string(),
                })?;
            let mut body = Vec::new();
            tokenize_body(line_no, &line[pos + 3..], &mut body)?;
            rules.push((name.to_string(), body));
        } else {
            match rules.last_mut() {
                Some((_, body)) => tokenize_body(line_no, line, body)?,
                None => return Err(GrammarError::MissingDefine { line: line_no }),
            }
        }
    }

    if !saw_content {
        return Err(GrammarError::EmptySource);
    }

    let mut parsed = Vec::with_capacity(rules.len());
    let mut index = HashMap::new();
    for (name, tokens) in rules {
        if index.contains_key(&name) {
            return Err(GrammarError::DuplicateRule { name });
        }
        let alts = parse_alternatives(tokens)?;
        index.insert(name.clone(), parsed.len());
        parsed.push((name, alts));
    }
    Ok(Grammar {
        rules: parsed,
        index,
    })
}

/// Render a grammar back to source text, one rule per line.
///
/// Reparsing the output yields a structurally equal grammar.
pub fn serialize(grammar: &Grammar) -> String {
    let mut out = String::new();
    for (name, alts) in grammar.rules() {
        let _ = write!(out, "<{name}> ::= ");
        for (i, alt) in alts.iter().enumerate() {
            if i > 0 {
                out.push_str(" | ");
            }
            let rendered: Vec<String> = alt
                .symbols
                .iter()
                .map(|s| match s {
                    Symbol::Terminal(t) => t.clone(),
                    Symbol::Nonterminal(n) => format!("<{n}>"),
                    Symbol::Param(p) => {
                        let kind = match p.kind {
                            ParamKind::Int => "int",
                            ParamKind::Float => "float",
                            ParamKind::Closed => "closed",
                        };
                        format!(
                            "[{},{},{},{},{}]",
                            p.name,
                            kind,
                            p.count,
                            format_bound(p.min),
                            format_bound(p.max)
                        )
                    }
                })
                .collect();
            out.push_str(&rendered.join(" "));
        }
        out.push('\n');
    }
    out
}

fn format_bound(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

/// Parse an outer-structure string `[(rule,min,max),...]`.
pub fn parse_outer(text: &str) -> Result<OuterStructure, GrammarError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(GrammarError::BadOuter("empty source".into()));
    }
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| GrammarError::BadOuter("expected [ ... ]".into()))?;

    let mut blocks = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        rest = rest.trim_start_matches(',').trim();
        if rest.is_empty() {
            break;
        }
        let open = rest
            .strip_prefix('(')
            .ok_or_else(|| GrammarError::BadOuter(format!("expected '(' at `{rest}`")))?;
        let close = open
            .find(')')
            .ok_or_else(|| GrammarError::BadOuter("unterminated tuple".into()))?;
        let tuple = &open[..close];
        let parts: Vec<&str> = tuple.split(',').map(str::trim).collect();
        if parts.len() != 3 || parts[0].is_empty() {
            return Err(GrammarError::BadOuter(format!(
                "malformed tuple `({tuple})`"
            )));
        }
        let min: usize = parts[1]
            .parse()
            .map_err(|_| GrammarError::BadOuter(format!("non-integer bound `{}`", parts[1])))?;
        let max: usize = parts[2]
            .parse()
            .map_err(|_| GrammarError::BadOuter(format!("non-integer bound `{}`", parts[2])))?;
        if min > max {
            return Err(GrammarError::OuterMinMax {
                rule: parts[0].to_string(),
                min,
                max,
            });
        }
        blocks.push(OuterBlock {
            rule: parts[0].to_string(),
            min_units: min,
            max_units: max,
        });
        rest = open[close + 1..].trim();
    }
    if blocks.is_empty() {
        return Err(GrammarError::BadOuter("no blocks".into()));
    }
    Ok(OuterStructure { blocks })
}

/// Render an outer structure back to its bracketed tuple form.
pub fn serialize_outer(outer: &OuterStructure) -> String {
    let tuples: Vec<String> = outer
        .blocks
        .iter()
        .map(|b| format!("({},{},{})", b.rule, b.min_units, b.max_units))
        .collect();
    format!("[{}]", tuples.join(","))
}

/// Cross-check a grammar against an outer structure.
///
/// Returns one diagnostic per unresolved symbol; empty means ok.
pub fn validate(grammar: &Grammar, outer: &OuterStructure) -> Vec<String> {
    let mut diags = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for block in &outer.blocks {
        if !grammar.has_rule(&block.rule) && seen.insert(block.rule.clone()) {
            diags.push(format!("unresolved: {}", block.rule));
        }
    }
    for (_, alts) in grammar.rules() {
        for alt in alts {
            for nt in alt.nonterminals() {
                if !grammar.has_rule(nt) && seen.insert(nt.to_string()) {
                    diags.push(format!("unresolved: {nt}"));
                }
            }
        }
    }
    diags
}
