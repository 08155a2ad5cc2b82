//! Planted-structure datasets.
//!
//! Topic `p` owns a disjoint block of vocabulary words and a disjoint unit
//! direction in region-feature space. A node of topic `p` carries that
//! direction (plus noise) in a few random regions and pure noise elsewhere,
//! uses each of the topic's words with probability `word_prob`, and is
//! labeled `p`, sometimes with one extra label from another topic.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Manifest, NodeRecord};
use crate::error::{DmanError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Number of topics `P`.
    pub topics: usize,
    pub nodes_per_topic: usize,
    /// Regions per node `D`.
    pub regions: usize,
    pub feat_dim: usize,
    /// Vocabulary size `L`.
    pub vocab: usize,
    pub words_per_topic: usize,
    /// Regions per node that carry the topic signature.
    pub signature_regions: usize,
    /// Standard deviation of the Gaussian noise on every feature.
    pub noise: f64,
    pub word_prob: f64,
    /// Chance that a node also gets the label of one other topic.
    pub co_label_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            nodes_per_topic: 50,
            regions: 8,
            feat_dim: 16,
            vocab: 40,
            words_per_topic: 10,
            signature_regions: 2,
            noise: 0.3,
            word_prob: 0.9,
            co_label_prob: 0.05,
            seed: 0,
        }
    }
}

/// A generated bundle plus the ground truth that was planted in it.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub bundle: DatasetBundle,
    /// Topic of each node.
    pub topic: Vec<usize>,
    /// Sorted region indices carrying the signature, per node.
    pub planted_regions: Vec<Vec<usize>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DmanError::Config(m));
        if self.topics == 0 || self.nodes_per_topic == 0 || self.words_per_topic == 0 {
            return fail("topics, nodes_per_topic and words_per_topic must be positive".into());
        }
        if self.topics * self.words_per_topic > self.vocab {
            return fail(format!(
                "{} topics x {} words overlap in a vocabulary of {}",
                self.topics, self.words_per_topic, self.vocab
            ));
        }
        if self.topics > self.feat_dim {
            return fail(format!(
                "{} disjoint signature directions do not fit in {} feature dims",
                self.topics, self.feat_dim
            ));
        }
        if self.regions == 0 || self.signature_regions == 0 || self.signature_regions > self.regions {
            return fail(format!(
                "signature_regions must be in 1..={}, got {}",
                self.regions, self.signature_regions
            ));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.word_prob > 0.0 && self.word_prob <= 1.0) {
            return fail(format!("word_prob must be in (0, 1], got {}", self.word_prob));
        }
        if !(0.0..=1.0).contains(&self.co_label_prob) {
            return fail(format!("co_label_prob must be in [0, 1], got {}", self.co_label_prob));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.topics * self.nodes_per_topic
    }

    /// Unit direction owned by topic `p`: equal weight on a disjoint block
    /// of coordinates.
    pub fn signature(&self, p: usize) -> Vec<f64> {
        let block = self.feat_dim / self.topics;
        let w = 1.0 / (block as f64).sqrt();
        (0..self.feat_dim)
            .map(|j| if j / block == p && j < block * self.topics { w } else { 0.0 })
            .collect()
    }

    pub fn topic_words(&self, p: usize) -> std::ops::Range<usize> {
        p * self.words_per_topic..(p + 1) * self.words_per_topic
    }

    /// Vocabulary index of the word that names label `p`.
    pub fn label_word(&self, p: usize) -> usize {
        p * self.words_per_topic
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, m) = (spec.regions, spec.feat_dim);
    let signatures: Vec<Vec<f64>> = (0..spec.topics).map(|p| spec.signature(p)).collect();

    let vocabulary: Vec<String> = (0..spec.vocab)
        .map(|w| {
            let p = w / spec.words_per_topic;
            if p < spec.topics {
                format!("t{p}w{}", w % spec.words_per_topic)
            } else {
                format!("filler{}", w - spec.topics * spec.words_per_topic)
            }
        })
        .collect();
    let labels: Vec<String> = (0..spec.topics).map(|p| vocabulary[spec.label_word(p)].clone()).collect();

    let n = spec.nodes();
    let mut regions = Vec::with_capacity(n * d * m);
    let mut records = Vec::with_capacity(n);
    let mut topic = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    for id in 0..n {
        let p = id / spec.nodes_per_topic;
        let mut marked: Vec<usize> = index::sample(&mut rng, d, spec.signature_regions).into_vec();
        marked.sort_unstable();
        for j in 0..d {
            let carries = marked.binary_search(&j).is_ok();
            for c in 0..m {
                let base = if carries { signatures[p][c] } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                regions.push((base + spec.noise * noise) as f32);
            }
        }
        let words = loop {
            let w: Vec<usize> = spec
                .topic_words(p)
                .filter(|_| rng.random::<f64>() < spec.word_prob)
                .collect();
            if !w.is_empty() {
                break w;
            }
        };
        let mut node_labels = vec![p];
        if spec.topics > 1 && rng.random::<f64>() < spec.co_label_prob {
            let mut q = rng.random_range(0..spec.topics - 1);
            if q >= p {
                q += 1;
            }
            node_labels.push(q);
            node_labels.sort_unstable();
        }
        records.push(NodeRecord {
            id,
            labels: node_labels,
            words,
        });
        topic.push(p);
        planted.push(marked);
    }

    let manifest = Manifest::new(n, spec.vocab, d, m, vocabulary, labels);
    let bundle = DatasetBundle {
        manifest,
        nodes: records,
        regions: Some(regions),
        images: None,
    };
    bundle.validate()?;
    Ok(SyntheticDataset {
        bundle,
        topic,
        planted_regions: planted,
    })
}
