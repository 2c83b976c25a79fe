// SPDX-License-Identifier: Apache-2.0

//! N-way K-shot Q-query episodes over whole conversations.
//!
//! A conversation is eligible for class `k` when at least one of its (kept)
//! messages is labeled `k`. Each class draws its support and query
//! conversations from a shared pool without replacement, so no conversation
//! appears twice in one episode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedConversation;
use crate::error::{Error, Result};

/// Attempts at a greedy draw before giving up on a corpus whose class
/// pools overlap so much that a random class order can starve a label.
const MAX_ATTEMPTS: usize = 64;

/// Defaults to the 7-way 5-shot 10-query setting with conversations cut at 35 messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_ways: usize,
    pub n_shots: usize,
    pub n_queries: usize,
    pub max_len: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self::new(7, 5, 10, 35)
    }
}

impl EpisodeSpec {
    pub fn new(n_ways: usize, n_shots: usize, n_queries: usize, max_len: usize) -> Self {
        Self {
            n_ways,
            n_shots,
            n_queries,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ways == 0 || self.n_shots == 0 || self.n_queries == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("episode spec fields must be positive: {self:?}")));
        }
        Ok(())
    }

    fn per_class(&self) -> usize {
        self.n_shots + self.n_queries
    }
}

/// Conversation indices per class. `support[k]` and `query[k]` belong to label index `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.support.len()
    }

    pub fn support_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().flatten().copied()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.query.iter().flatten().copied()
    }
}

/// Per-label eligibility lists for one split.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    spec: EpisodeSpec,
    labels: Vec<String>,
    eligible: Vec<Vec<usize>>,
    n_conversations: usize,
}

impl EpisodeSampler {
    /// `conversations` must already be trimmed to `spec.max_len`.
    pub fn new(conversations: &[EncodedConversation], labels: &[String], spec: EpisodeSpec) -> Result<Self> {
        spec.validate()?;
        if spec.n_ways != labels.len() {
            return Err(Error::Config(format!(
                "n_ways = {} but the corpus has {} labels; episodes always use the full label set",
                spec.n_ways,
                labels.len()
            )));
        }
        let mut eligible = vec![Vec::new(); labels.len()];
        for (i, conv) in conversations.iter().enumerate() {
            let mut seen = vec![false; labels.len()];
            for &l in conv.labels.iter().take(spec.max_len) {
                if !seen[l] {
                    seen[l] = true;
                    eligible[l].push(i);
                }
            }
        }
        Ok(Self {
            spec,
            labels: labels.to_vec(),
            eligible,
            n_conversations: conversations.len(),
        })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn eligible(&self, label: usize) -> &[usize] {
        &self.eligible[label]
    }

    /// Exact check that some assignment satisfies every class at once
    /// (a bipartite b-matching of classes to distinct conversations).
    pub fn check_feasible(&self) -> Result<()> {
        let need = self.spec.per_class();
        let mut owner: Vec<Option<usize>> = vec![None; self.n_conversations];
        for k in 0..self.labels.len() {
            if self.eligible[k].len() < need {
                return Err(self.infeasible(k, self.eligible[k].len()));
            }
            for got in 0..need {
                let mut visited = vec![false; self.n_conversations];
                if !self.augment(k, &mut owner, &mut visited) {
                    return Err(self.infeasible(k, got));
                }
            }
        }
        Ok(())
    }

    fn augment(&self, class: usize, owner: &mut [Option<usize>], visited: &mut [bool]) -> bool {
        for &c in &self.eligible[class] {
            if visited[c] {
                continue;
            }
            visited[c] = true;
            match owner[c] {
                None => {
                    owner[c] = Some(class);
                    return true;
                }
                Some(other) => {
                    if other != class && self.augment(other, owner, visited) {
                        owner[c] = Some(class);
                        return true;
                    }
                }
            }
        }
        false
    }

    fn infeasible(&self, label: usize, available: usize) -> Error {
        Error::Infeasible {
            label: self.labels[label].clone(),
            needed: self.spec.per_class(),
            available,
        }
    }

    /// Draws one episode: classes in a shuffled order, conversations uniformly
    /// without replacement from what earlier classes left over.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        let mut last_err = None;
        for _ in 0..MAX_ATTEMPTS {
            match self.try_sample(rng) {
                Ok(ep) => return Ok(ep),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn try_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        let k = self.labels.len();
        let need = self.spec.per_class();
        let mut used = vec![false; self.n_conversations];
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);

        let mut support = vec![Vec::new(); k];
        let mut query = vec![Vec::new(); k];
        for class in order {
            let mut pool: Vec<usize> = self.eligible[class].iter().copied().filter(|&c| !used[c]).collect();
            if pool.len() < need {
                return Err(self.infeasible(class, pool.len()));
            }
            let (chosen, _) = pool.partial_shuffle(rng, need);
            for &c in chosen.iter() {
                used[c] = true;
            }
            support[class] = chosen[..self.spec.n_shots].to_vec();
            query[class] = chosen[self.spec.n_shots..].to_vec();
        }
        Ok(Episode { support, query })
    }
}

/// Convenience wrapper around [`EpisodeSampler`].
pub fn sample_episode<R: Rng + ?Sized>(
    conversations: &[EncodedConversation],
    labels: &[String],
    spec: EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    EpisodeSampler::new(conversations, labels, spec)?.sample(rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn conv(id: usize, labels: &[usize]) -> EncodedConversation {
        EncodedConversation {
            id: format!("c{id}"),
            utterances: labels.iter().map(|_| vec![2]).collect(),
            labels: labels.to_vec(),
        }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn seven_way_counts() {
        let convs: Vec<_> = (0..200).map(|i| conv(i, &[i % 7, (i + 1) % 7])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&convs, &names(7), EpisodeSpec::new(7, 5, 10, 35), &mut rng).unwrap();
        assert_eq!(ep.support_ids().count(), 35);
        assert_eq!(ep.query_ids().count(), 70);
    }

    #[test]
    fn one_conversation_per_label_is_infeasible() {
        let convs: Vec<_> = (0..3).map(|i| conv(i, &[i])).collect();
        let sampler = EpisodeSampler::new(&convs, &names(3), EpisodeSpec::new(3, 5, 10, 35)).unwrap();
        assert!(matches!(sampler.check_feasible(), Err(Error::Infeasible { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match sampler.sample(&mut rng) {
            Err(Error::Infeasible { needed, available, .. }) => {
                assert_eq!(needed, 15);
                assert_eq!(available, 1);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn overlap_starvation_names_the_label() {
        // Label 1 only occurs inside conversations that label 0 also needs.
        let mut convs: Vec<_> = (0..2).map(|i| conv(i, &[0, 1])).collect();
        convs.push(conv(2, &[0]));
        let sampler = EpisodeSampler::new(&convs, &names(2), EpisodeSpec::new(2, 1, 1, 10)).unwrap();
        match sampler.check_feasible() {
            Err(Error::Infeasible { label, .. }) => assert_eq!(label, "l1"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn matching_finds_assignment_greedy_could_miss() {
        let spec = EpisodeSpec::new(2, 1, 1, 10);
        // l1 fits only {0, 1}, so l0 must take {2, 3}; any other draw is retried.
        let convs = vec![conv(0, &[0, 1]), conv(1, &[0, 1]), conv(2, &[0]), conv(3, &[0])];
        let sampler = EpisodeSampler::new(&convs, &names(2), spec).unwrap();
        sampler.check_feasible().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ep = sampler.sample(&mut rng).unwrap();
            assert!(ep.query[1].iter().chain(&ep.support[1]).all(|&c| c < 2));
        }
    }

    #[test]
    fn labels_beyond_max_len_do_not_count() {
        let convs = vec![conv(0, &[0, 0, 1]), conv(1, &[1])];
        let sampler = EpisodeSampler::new(&convs, &names(2), EpisodeSpec::new(2, 1, 1, 2)).unwrap();
        assert_eq!(sampler.eligible(1), &[1]);
    }

    #[test]
    fn ways_must_match_label_count() {
        let convs = vec![conv(0, &[0])];
        assert!(EpisodeSampler::new(&convs, &names(2), EpisodeSpec::new(3, 1, 1, 5)).is_err());
    }
}
