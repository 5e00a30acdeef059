//! N-way K-shot episodes drawn from a single domain.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, DomainManifest, Example};
use crate::error::{Error, Result};

/// Support and query sets of exactly `k_shot` examples per class each.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub domain_id: String,
    pub manifest: DomainManifest,
    pub n_way: usize,
    pub k_shot: usize,
    /// `(example, class)` pairs; the class always equals the example's label index.
    pub support: Vec<(Example, usize)>,
    pub query: Vec<(Example, usize)>,
}

impl Episode {
    /// Checks balance, single-domain membership and support/query disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Sampling(m));
        if self.n_way != self.manifest.n_classes() || self.domain_id != self.manifest.domain_id {
            return bad("episode header disagrees with its manifest".into());
        }
        for (name, set) in [("support", &self.support), ("query", &self.query)] {
            let mut counts = vec![0usize; self.n_way];
            for (e, c) in set {
                if e.domain_id != self.domain_id {
                    return bad(format!("{name} example {} is from domain {:?}", e.ordinal, e.domain_id));
                }
                if *c >= self.n_way || e.label_index != *c {
                    return bad(format!("{name} example {} carries a wrong class", e.ordinal));
                }
                counts[*c] += 1;
            }
            if counts.iter().any(|&n| n != self.k_shot) {
                return bad(format!("{name} set is not {}-per-class: {counts:?}", self.k_shot));
            }
        }
        let support: HashSet<usize> = self.support.iter().map(|(e, _)| e.ordinal).collect();
        if support.len() != self.support.len() {
            return bad("support set repeats an example".into());
        }
        if let Some((e, _)) = self.query.iter().find(|(e, _)| support.contains(&e.ordinal)) {
            return bad(format!("example {} is in both support and query", e.ordinal));
        }
        let query: HashSet<usize> = self.query.iter().map(|(e, _)| e.ordinal).collect();
        if query.len() != self.query.len() {
            return bad("query set repeats an example".into());
        }
        Ok(())
    }

    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|(_, c)| *c).collect()
    }

    pub fn query_classes(&self) -> Vec<usize> {
        self.query.iter().map(|(_, c)| *c).collect()
    }
}

/// Whether every class of `d` has at least `2k` examples.
pub fn supports_k(d: &Dataset, k: usize) -> bool {
    k > 0 && d.class_counts().iter().all(|&n| n >= 2 * k)
}

/// Draws disjoint support and query sets of `k` per class from `d`.
pub fn episode_from(d: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    if !supports_k(d, k) {
        return Err(Error::Sampling(format!(
            "domain {:?} cannot furnish {} examples per class",
            d.domain_id(),
            2 * k
        )));
    }
    let mut support = Vec::with_capacity(k * d.n_classes());
    let mut query = Vec::with_capacity(k * d.n_classes());
    for (class, mut idx) in d.indices_by_class().into_iter().enumerate() {
        idx.shuffle(rng);
        support.extend(idx[..k].iter().map(|&i| (d.examples[i].clone(), class)));
        query.extend(idx[k..2 * k].iter().map(|&i| (d.examples[i].clone(), class)));
    }
    Ok(Episode {
        domain_id: d.domain_id().to_string(),
        manifest: d.manifest.clone(),
        n_way: d.n_classes(),
        k_shot: k,
        support,
        query,
    })
}

/// Samples one episode. With `k` fixed, the domain is uniform over those that
/// can furnish `2k` per class. Otherwise `k` is first drawn uniformly from the
/// choices that at least one domain can satisfy.
pub fn sample_episode(
    domains: &[&Dataset],
    k: Option<usize>,
    k_choices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let k = match k {
        Some(k) => k,
        None => {
            let feasible: Vec<usize> = k_choices
                .iter()
                .copied()
                .filter(|&k| domains.iter().any(|d| supports_k(d, k)))
                .collect();
            *feasible.choose(rng).ok_or_else(|| {
                Error::Sampling(format!("no domain has twice any of {k_choices:?} examples per class"))
            })?
        }
    };
    let eligible: Vec<&Dataset> = domains.iter().copied().filter(|d| supports_k(d, k)).collect();
    let d = eligible
        .choose(rng)
        .ok_or_else(|| Error::Sampling(format!("no domain has {} examples in every class", 2 * k)))?;
    episode_from(d, k, rng)
}

/// Episode stream over a fixed set of domains, counting draws.
#[derive(Clone, Debug)]
pub struct EpisodeSampler<'a> {
    domains: Vec<&'a Dataset>,
    k_choices: Vec<usize>,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(domains: Vec<&'a Dataset>, k_choices: Vec<usize>, seed: u64) -> Self {
        Self::with_rng(domains, k_choices, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(domains: Vec<&'a Dataset>, k_choices: Vec<usize>, rng: ChaCha8Rng) -> Self {
        Self {
            domains,
            k_choices,
            rng,
            drawn: 0,
        }
    }

    pub fn draw(&mut self) -> Result<Episode> {
        let ep = sample_episode(&self.domains, None, &self.k_choices, &mut self.rng)?;
        self.drawn += 1;
        Ok(ep)
    }

    pub fn drawn(&self) -> usize {
        self.drawn
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelDef, SplitTag};

    fn dataset(id: &str, per_class: &[usize]) -> Dataset {
        let labels = (0..per_class.len())
            .map(|c| LabelDef::new(format!("c{c}"), ""))
            .collect();
        let manifest = DomainManifest::new(id, labels).unwrap();
        let mut examples = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                let ordinal = examples.len();
                examples.push(Example {
                    text: format!("t{ordinal}"),
                    label_index: c,
                    domain_id: id.into(),
                    id: None,
                    ordinal,
                });
            }
        }
        Dataset::new(manifest, examples, SplitTag::Train).unwrap()
    }

    #[test]
    fn three_by_forty_at_sixteen() {
        let d = dataset("a", &[40, 40, 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&[&d], Some(16), &[16], &mut rng).unwrap();
        assert_eq!(ep.support.len(), 48);
        assert_eq!(ep.query.len(), 48);
        ep.validate().unwrap();
    }

    #[test]
    fn short_class_excludes_domain() {
        let short = dataset("short", &[40, 31]);
        let ok = dataset("ok", &[32, 32]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let ep = sample_episode(&[&short, &ok], Some(16), &[16], &mut rng).unwrap();
            assert_eq!(ep.domain_id, "ok");
        }
        assert!(sample_episode(&[&short], Some(16), &[16], &mut rng).is_err());
    }

    #[test]
    fn unsatisfiable_choices_error() {
        let d = dataset("a", &[10, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_episode(&[&d], None, &[16, 32], &mut rng),
            Err(Error::Sampling(_))
        ));
        let ep = sample_episode(&[&d], None, &[16, 4], &mut rng).unwrap();
        assert_eq!(ep.k_shot, 4);
    }

    #[test]
    fn seeded_stream_repeats() {
        let a = dataset("a", &[40, 40]);
        let b = dataset("b", &[70, 70, 70]);
        let run = || {
            let mut s = EpisodeSampler::new(vec![&a, &b], vec![4, 8, 16, 32], 9);
            (0..1000)
                .map(|_| {
                    let ep = s.draw().unwrap();
                    (ep.domain_id, ep.k_shot, ep.support[0].0.ordinal, ep.query[0].0.ordinal)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overlapping_sets_rejected() {
        let d = dataset("a", &[8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ep = episode_from(&d, 2, &mut rng).unwrap();
        ep.query = ep.support.clone();
        assert!(ep.validate().is_err());
    }
}
