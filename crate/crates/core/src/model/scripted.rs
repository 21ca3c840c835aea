use std::collections::BTreeMap;

use super::{check_vocab, ModelBackend};
use crate::error::{LopaError, Result};
use crate::types::{Distribution, PositionSet, Prediction, SequenceState, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternSym {
    Token(TokenId),
    /// Matches any position, filled or not.
    Any,
    /// Matches only a masked position.
    Masked,
}

impl PatternSym {
    fn matches(self, tok: Option<TokenId>) -> bool {
        match self {
            PatternSym::Token(t) => tok == Some(t),
            PatternSym::Any => true,
            PatternSym::Masked => tok.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub pattern: Vec<PatternSym>,
    pub outputs: BTreeMap<usize, Distribution>,
}

impl Rule {
    fn matches(&self, state: &SequenceState) -> bool {
        self.pattern.len() == state.len()
            && self
                .pattern
                .iter()
                .zip(state.tokens())
                .all(|(sym, tok)| sym.matches(*tok))
    }
}

/// Hand-written predictor for traceable fixtures.
///
/// Rules are tried in order and the first whose pattern matches the whole
/// sequence supplies distributions; positions a rule leaves out, and states no
/// rule matches, get the default distribution (uniform unless set).
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedModel {
    vocab_size: usize,
    rules: Vec<Rule>,
    default: Option<Distribution>,
}

impl ScriptedModel {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(LopaError::EmptyVocab);
        }
        Ok(Self {
            vocab_size,
            rules: Vec::new(),
            default: None,
        })
    }

    pub fn with_default(mut self, dist: Distribution) -> Result<Self> {
        self.default = Some(self.normalized(dist)?);
        Ok(self)
    }

    /// Appends a rule. `pattern` uses `*` for any, `_` for masked, digits for tokens,
    /// separated by whitespace or commas, e.g. `"1 * _"`.
    pub fn rule(mut self, pattern: &str, outputs: impl IntoIterator<Item = (usize, Distribution)>) -> Result<Self> {
        let pattern = parse_pattern(pattern)?;
        let mut normalized = BTreeMap::new();
        for (pos, dist) in outputs {
            if pos >= pattern.len() {
                return Err(LopaError::PositionOutOfRange(pos));
            }
            normalized.insert(pos, self.normalized(dist)?);
        }
        self.rules.push(Rule {
            pattern,
            outputs: normalized,
        });
        Ok(self)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn normalized(&self, mut dist: Distribution) -> Result<Distribution> {
        if dist.len() != self.vocab_size {
            return Err(LopaError::InvalidDistribution(format!(
                "expected {} entries, got {}",
                self.vocab_size,
                dist.len()
            )));
        }
        if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LopaError::InvalidDistribution("negative or non-finite entry".into()));
        }
        let sum: f64 = dist.iter().sum();
        if sum <= 0.0 {
            return Err(LopaError::InvalidDistribution("all-zero".into()));
        }
        dist.iter_mut().for_each(|p| *p /= sum);
        Ok(dist)
    }

    fn default_dist(&self) -> Distribution {
        self.default
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.vocab_size as f64; self.vocab_size])
    }
}

pub(super) fn parse_pattern(text: &str) -> Result<Vec<PatternSym>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "*" => Ok(PatternSym::Any),
            "_" => Ok(PatternSym::Masked),
            tok => tok
                .parse::<TokenId>()
                .map(PatternSym::Token)
                .map_err(|_| LopaError::InvalidConfig(format!("bad pattern symbol {tok:?}"))),
        })
        .collect()
}

impl ModelBackend for ScriptedModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        check_vocab(self.vocab_size, state)?;
        let rule = self.rules.iter().find(|r| r.matches(state));
        Ok(window
            .iter()
            .copied()
            .filter(|&i| state.is_masked(i))
            .map(|i| {
                let dist = rule
                    .and_then(|r| r.outputs.get(&i).cloned())
                    .unwrap_or_else(|| self.default_dist());
                (i, dist)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::full_window;

    #[test]
    fn first_matching_rule_wins() {
        let m = ScriptedModel::new(4)
            .unwrap()
            .rule("1 * *", [(1, vec![0.0, 1.0, 0.0, 0.0])])
            .unwrap()
            .rule("1 _ _", [(1, vec![1.0, 0.0, 0.0, 0.0])])
            .unwrap();
        let s = SequenceState::new(&[1], 2, 4).unwrap();
        let p = m.predict(&s, &full_window(&s)).unwrap();
        assert_eq!(p[&1], vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(p[&2], vec![0.25; 4]);
    }

    #[test]
    fn window_excludes_positions() {
        let m = ScriptedModel::new(2).unwrap();
        let s = SequenceState::new(&[1], 2, 2).unwrap();
        let p = m.predict(&s, &[1].into_iter().collect()).unwrap();
        assert!(p.contains_key(&1) && !p.contains_key(&2));
    }

    #[test]
    fn masked_symbol_requires_empty_position() {
        let m = ScriptedModel::new(2)
            .unwrap()
            .rule("0 _ *", [(2, vec![1.0, 0.0])])
            .unwrap();
        let s = SequenceState::new(&[0], 2, 2).unwrap();
        assert_eq!(m.predict(&s, &full_window(&s)).unwrap()[&2], vec![1.0, 0.0]);
        let s = s.apply_fills(&[(1, 1)].into_iter().collect()).unwrap();
        assert_eq!(m.predict(&s, &full_window(&s)).unwrap()[&2], vec![0.5, 0.5]);
    }

    #[test]
    fn outputs_are_normalized() {
        let m = ScriptedModel::new(2).unwrap().with_default(vec![3.0, 1.0]).unwrap();
        let s = SequenceState::new(&[], 1, 2).unwrap();
        assert_eq!(m.predict(&s, &full_window(&s)).unwrap()[&0], vec![0.75, 0.25]);
        assert!(ScriptedModel::new(2).unwrap().with_default(vec![0.0, 0.0]).is_err());
        assert!(ScriptedModel::new(2).unwrap().rule("0 x", []).is_err());
    }
}
