//! Greedy decoding and beam search over any next-token scorer.
//!
//! Scores are raw cumulative log-probabilities (no length normalization).
//! Ties between equal scores go to the lexicographically smaller id
//! sequence, which for greedy decoding means the lowest token id.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::model::{decoder_step, log_softmax, prepare_source, DecoderCache, EncodedInput, ModelError, ModelParams};
use crate::tokenizer::{EOS, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the closing EOS when finished.
    pub ids: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub max_length: usize,
}

impl DecodeOptions {
    pub fn new(beam_size: usize, max_length: usize) -> Self {
        DecodeOptions {
            beam_size,
            max_length,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidOptions("beam size must be at least 1".into()));
        }
        if self.max_length == 0 {
            return Err(DecodeError::InvalidOptions("max_length must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Next-token log-probabilities as a function of the generated prefix.
pub trait Scorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: u32) -> Self::State;
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_search<S: Scorer>(scorer: &S, max_length: usize) -> Hypothesis {
    let mut state = scorer.initial_state();
    let mut hyp = Hypothesis {
        ids: Vec::new(),
        score: 0.0,
        finished: false,
    };
    while hyp.ids.len() < max_length {
        let lp = scorer.log_probs(&state);
        let token = argmax(&lp) as u32;
        hyp.ids.push(token);
        hyp.score += lp[token as usize];
        if token == EOS {
            hyp.finished = true;
            break;
        }
        if hyp.ids.len() < max_length {
            state = scorer.advance(&state, token);
        }
    }
    hyp
}

/// Best first: higher score, then lexicographically smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

struct Live<St> {
    hyp: Hypothesis,
    state: St,
}

pub fn beam_search_with<S: Scorer>(scorer: &S, options: &DecodeOptions) -> Result<Vec<Hypothesis>, DecodeError> {
    options.validate()?;
    let k = options.beam_size;
    let vocab = scorer.vocab_size();
    let mut live = vec![Live {
        hyp: Hypothesis {
            ids: Vec::new(),
            score: 0.0,
            finished: false,
        },
        state: scorer.initial_state(),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut stopped_early = false;
    for length in 1..=options.max_length {
        // (parent, token, score)
        let mut expansions: Vec<(usize, u32, f64)> = Vec::with_capacity(live.len() * vocab);
        for (parent, l) in live.iter().enumerate() {
            let lp = scorer.log_probs(&l.state);
            expansions.extend(
                lp.iter()
                    .enumerate()
                    .map(|(tok, &p)| (parent, tok as u32, l.hyp.score + p)),
            );
        }
        let order = |a: &(usize, u32, f64), b: &(usize, u32, f64)| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].hyp.ids.cmp(&live[b.0].hyp.ids))
                .then_with(|| a.1.cmp(&b.1))
        };
        if expansions.len() > k {
            expansions.select_nth_unstable_by(k - 1, order);
            expansions.truncate(k);
        }
        expansions.sort_by(order);

        let mut next = Vec::with_capacity(k);
        for (parent, token, score) in expansions {
            let mut ids = live[parent].hyp.ids.clone();
            ids.push(token);
            if token == EOS {
                pool.push(Hypothesis {
                    ids,
                    score,
                    finished: true,
                });
            } else {
                let state = if length < options.max_length {
                    scorer.advance(&live[parent].state, token)
                } else {
                    live[parent].state.clone()
                };
                next.push(Live {
                    hyp: Hypothesis {
                        ids,
                        score,
                        finished: false,
                    },
                    state,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if pool.len() >= k && length < options.max_length {
            pool.sort_by(rank);
            let best_live = live.iter().map(|l| l.hyp.score).fold(f64::NEG_INFINITY, f64::max);
            // extending a hypothesis can only lower its score
            if best_live <= pool[k - 1].score {
                stopped_early = true;
                break;
            }
        }
    }
    let mut result = pool;
    if !stopped_early {
        result.extend(live.into_iter().map(|l| l.hyp));
    }
    result.sort_by(rank);
    result.truncate(k);
    Ok(result)
}

/// Scores continuations with the transformer, reusing the decoder's
/// key/value cache along each hypothesis.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    source: EncodedInput,
}

#[derive(Clone)]
pub struct ModelState {
    cache: DecoderCache,
    log_probs: Rc<Vec<f64>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, input: &[u32]) -> Result<Self, ModelError> {
        Ok(ModelScorer {
            params,
            source: prepare_source(params, input)?,
        })
    }

    fn step(&self, cache: &mut DecoderCache, token: u32) -> Rc<Vec<f64>> {
        let logits = decoder_step(self.params, &self.source, cache, token)
            .expect("token ids come from the model's own vocabulary");
        let lp = log_softmax(logits.view().insert_axis(ndarray::Axis(0)));
        Rc::new(lp.into_raw_vec_and_offset().0)
    }
}

impl Scorer for ModelScorer<'_> {
    type State = ModelState;

    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn initial_state(&self) -> ModelState {
        let mut cache = DecoderCache::new(self.params);
        let log_probs = self.step(&mut cache, PAD);
        ModelState { cache, log_probs }
    }

    fn log_probs(&self, state: &ModelState) -> Vec<f64> {
        state.log_probs.as_ref().clone()
    }

    fn advance(&self, state: &ModelState, token: u32) -> ModelState {
        let mut cache = state.cache.clone();
        let log_probs = self.step(&mut cache, token);
        ModelState { cache, log_probs }
    }
}

pub fn greedy_decode(params: &ModelParams, input: &[u32], max_length: usize) -> Result<Hypothesis, DecodeError> {
    DecodeOptions::new(1, max_length).validate()?;
    Ok(greedy_search(&ModelScorer::new(params, input)?, max_length))
}

pub fn beam_search(
    params: &ModelParams,
    input: &[u32],
    options: &DecodeOptions,
) -> Result<Vec<Hypothesis>, DecodeError> {
    options.validate()?;
    beam_search_with(&ModelScorer::new(params, input)?, options)
}

/// Scorer backed by an explicit table of next-token distributions for every
/// prefix up to a maximum length; used as a decoding oracle.
#[derive(Debug, Clone)]
pub struct TableScorer {
    vocab_size: usize,
    max_length: usize,
    /// Distributions indexed by the prefix's position in enumeration order.
    tables: Vec<Vec<f64>>,
}

impl TableScorer {
    /// Random log-probability tables drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, max_length: usize, rng: &mut R) -> Self {
        assert!(vocab_size > EOS as usize, "vocabulary must contain EOS");
        let count: usize = (0..max_length).map(|l| vocab_size.pow(l as u32)).sum();
        let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
        let tables = (0..count)
            .map(|_| {
                let draws: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng) + 1e-12).collect();
                let total: f64 = draws.iter().sum();
                draws.iter().map(|d| (d / total).ln()).collect()
            })
            .collect();
        TableScorer {
            vocab_size,
            max_length,
            tables,
        }
    }

    /// Builds a scorer from explicit distributions (probabilities), listed
    /// for prefixes in order of length, then lexicographically.
    pub fn from_probabilities(vocab_size: usize, max_length: usize, probs: Vec<Vec<f64>>) -> Self {
        let count: usize = (0..max_length).map(|l| vocab_size.pow(l as u32)).sum();
        assert_eq!(probs.len(), count, "one distribution per prefix");
        TableScorer {
            vocab_size,
            max_length,
            tables: probs
                .into_iter()
                .map(|row| row.into_iter().map(f64::ln).collect())
                .collect(),
        }
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    fn index(&self, prefix: &[u32]) -> usize {
        let offset: usize = (0..prefix.len()).map(|l| self.vocab_size.pow(l as u32)).sum();
        offset
            + prefix
                .iter()
                .fold(0, |acc, &t| acc * self.vocab_size + t as usize)
    }

    pub fn log_prob(&self, prefix: &[u32], token: u32) -> f64 {
        self.tables[self.index(prefix)][token as usize]
    }
}

impl Scorer for TableScorer {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self) -> Vec<u32> {
        Vec::new()
    }

    fn log_probs(&self, prefix: &Vec<u32>) -> Vec<f64> {
        self.tables[self.index(prefix)].clone()
    }

    fn advance(&self, prefix: &Vec<u32>, token: u32) -> Vec<u32> {
        let mut next = prefix.clone();
        next.push(token);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Every complete sequence: ends at its first EOS, or runs to max_length.
    fn enumerate(scorer: &TableScorer, max_length: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut frontier = vec![(Vec::<u32>::new(), 0.0)];
        for len in 1..=max_length {
            let mut next = Vec::new();
            for (prefix, score) in frontier {
                for tok in 0..scorer.vocab_size as u32 {
                    let s = score + scorer.log_prob(&prefix, tok);
                    let mut ids = prefix.clone();
                    ids.push(tok);
                    if tok == EOS || len == max_length {
                        out.push(Hypothesis {
                            ids,
                            score: s,
                            finished: tok == EOS,
                        });
                    } else {
                        next.push((ids, s));
                    }
                }
            }
            frontier = next;
        }
        out.sort_by(rank);
        out
    }

    fn rescore(scorer: &TableScorer, ids: &[u32]) -> f64 {
        (0..ids.len()).map(|i| scorer.log_prob(&ids[..i], ids[i])).sum()
    }

    #[test]
    fn hand_traced_greedy_path() {
        // Vocab {PAD, EOS, x}. Start: x 0.6, EOS 0.25. After x: EOS 0.5, x 0.4.
        // Greedy path: x, EOS.
        let p = vec![
            vec![0.15, 0.25, 0.6],
            vec![0.2, 0.3, 0.5],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.5, 0.4],
        ];
        let scorer = TableScorer::from_probabilities(3, 2, p);
        let hyp = greedy_search(&scorer, 2);
        assert_eq!(hyp.ids, vec![2, EOS]);
        assert!(hyp.finished);
        assert!((hyp.score - (0.6f64.ln() + 0.5f64.ln())).abs() < 1e-15);

        // Beam of 2: x EOS (0.3), then EOS (0.25) ahead of x x (0.24).
        let beams = beam_search_with(&scorer, &DecodeOptions::new(2, 2)).unwrap();
        assert_eq!(beams[0].ids, vec![2, EOS]);
        assert_eq!(beams[1].ids, vec![EOS]);
    }

    #[test]
    fn greedy_tie_goes_to_lowest_id() {
        let scorer = TableScorer::from_probabilities(3, 1, vec![vec![0.4, 0.2, 0.4]]);
        assert_eq!(greedy_search(&scorer, 1).ids, vec![0]);
    }

    #[test]
    fn max_length_one_gives_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scorer = TableScorer::random(4, 3, &mut rng);
        assert_eq!(greedy_search(&scorer, 1).ids.len(), 1);
    }

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (v, l) = (rng.random_range(2..=5), rng.random_range(1..=4));
            let scorer = TableScorer::random(v, l, &mut rng);
            let all = enumerate(&scorer, l);
            let k = v.pow(l as u32);
            let beams = beam_search_with(&scorer, &DecodeOptions::new(k, l)).unwrap();
            assert_eq!(beams[0].ids, all[0].ids);
            assert_eq!(beams.len(), k.min(all.len()));
            for (b, a) in beams.iter().zip(&all) {
                assert_eq!(b.ids, a.ids);
            }
        }
    }

    #[test]
    fn beam_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let scorer = TableScorer::random(5, 4, &mut rng);
            let k = rng.random_range(1..8);
            let beams = beam_search_with(&scorer, &DecodeOptions::new(k, 4)).unwrap();
            assert!(beams.len() <= k && !beams.is_empty());
            for pair in beams.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
            for b in &beams {
                assert!((b.score - rescore(&scorer, &b.ids)).abs() < 1e-12);
                assert!(b.ids.last() == Some(&EOS) || b.ids.len() == 4);
                assert_eq!(b.finished, b.ids.last() == Some(&EOS));
                assert!(!b.ids[..b.ids.len() - 1].contains(&EOS));
            }
            let greedy = greedy_search(&scorer, 4);
            let one = beam_search_with(&scorer, &DecodeOptions::new(1, 4)).unwrap();
            assert_eq!(one, vec![greedy]);
            let wider = beam_search_with(&scorer, &DecodeOptions::new(k + 3, 4)).unwrap();
            assert!(wider[0].score >= beams[0].score);
        }
    }

    #[test]
    fn rejects_bad_options() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scorer = TableScorer::random(3, 2, &mut rng);
        assert!(beam_search_with(&scorer, &DecodeOptions::new(0, 2)).is_err());
        assert!(beam_search_with(&scorer, &DecodeOptions::new(2, 0)).is_err());
    }

    #[test]
    fn model_beam_of_one_is_greedy() {
        let mut config = ModelConfig::toy(40);
        config.d_model = 16;
        config.d_ff = 16;
        config.d_kv = 4;
        config.num_heads = 2;
        let params = init_params(&config, 3);
        let input = [5, 6, 7, EOS];
        let greedy = greedy_decode(&params, &input, 6).unwrap();
        let beam = beam_search(&params, &input, &DecodeOptions::new(1, 6)).unwrap();
        assert_eq!(beam, vec![greedy.clone()]);
        let wide = beam_search(&params, &input, &DecodeOptions::new(4, 6)).unwrap();
        assert!(wide[0].score >= greedy.score - 1e-12);
        assert_eq!(wide, beam_search(&params, &input, &DecodeOptions::new(4, 6)).unwrap());
    }
}
