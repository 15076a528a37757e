//! Built-in synthetic benchmark corpus.
//!
//! Each topic has one answer, three gold distractors, one high-confidence
//! bait token, and a shared set of low-confidence pad tokens. The scripted
//! candidate order per instance is bait, the three golds, then the pads.
//! During pool construction the golds are filtered out, so the generated
//! slice is exactly bait + pads; at inference the golds are back among the
//! candidates. Gold and bait rewards only differ through the generated-
//! candidate coefficient, which makes the corpus a sharp probe for it: with
//! the dual reward the golds strictly outearn the bait, with a uniform
//! coefficient the bait ties them.

use crate::data::{Candidate, ClozeInstance};
use crate::pipeline::{PipelineError, ScriptedGenerator, TrainConfig};
use crate::policy::FeatureSpec;

/// Corpus dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    /// Distinct topics, each with its own answer/gold/bait tokens.
    /// Default: 20.
    pub n_topics: usize,
    /// Instances per topic. Default: 25.
    pub per_topic: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 20,
            per_topic: 25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_topics == 0 || self.per_topic == 0 {
            return Err(PipelineError::InvalidConfig(
                "synthetic corpus needs at least one topic and one instance".to_string(),
            ));
        }
        Ok(())
    }
}

/// Instances plus the scripted generator that proposes their candidates.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub instances: Vec<ClozeInstance>,
    pub generator: ScriptedGenerator,
}

const PADS: [&str; 6] = ["pad0", "pad1", "pad2", "pad3", "pad4", "pad5"];

fn script_for_topic(topic: usize) -> Vec<Candidate> {
    let mut script = vec![
        Candidate {
            token: format!("bait{topic:02}"),
            confidence: 1.0,
        },
        Candidate {
            token: format!("gd{topic:02}a"),
            confidence: 0.9,
        },
        Candidate {
            token: format!("gd{topic:02}b"),
            confidence: 0.85,
        },
        Candidate {
            token: format!("gd{topic:02}c"),
            confidence: 0.8,
        },
    ];
    for pad in PADS {
        script.push(Candidate {
            token: pad.to_string(),
            confidence: 0.1,
        });
    }
    script
}

/// Deterministically builds the corpus and its candidate scripts.
pub fn build_corpus(config: &SynthConfig) -> Result<SynthCorpus, PipelineError> {
    config.validate()?;
    let mut instances = Vec::with_capacity(config.n_topics * config.per_topic);
    let mut generator = ScriptedGenerator::new();
    for topic in 0..config.n_topics {
        let context = format!(
            "unit u{topic:02} practice p{topic:02} fill the [BLANK] for quiz q{topic:02}"
        );
        let script = script_for_topic(topic);
        for i in 0..config.per_topic {
            let id = format!("t{topic:02}i{i:03}");
            instances.push(ClozeInstance {
                id: id.clone(),
                context: context.clone(),
                answer: format!("ans{topic:02}"),
                gold_distractors: vec![
                    format!("gd{topic:02}a"),
                    format!("gd{topic:02}b"),
                    format!("gd{topic:02}c"),
                ],
            });
            generator.add_script(id, script.clone());
        }
    }
    Ok(SynthCorpus {
        instances,
        generator,
    })
}

/// Training hyperparameters tuned for the synthetic corpus.
///
/// The large optimizer epsilon is deliberate. With the stock 1e-8 the
/// update collapses to lr * sign(gradient), so a reward that is 10% larger
/// moves a weight by the same amount as one that is 10% smaller and the
/// reward coefficient stops mattering. An epsilon above the typical
/// per-coordinate gradient magnitude keeps steps proportional to reward,
/// which is exactly the margin this corpus probes. The wide batch averages
/// out shuffle noise so that margin decides every topic.
pub fn experiment_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 64,
        feature: FeatureSpec { dim: 128 },
        optimizer: crate::policy::AdamWConfig {
            lr: 0.02,
            eps: 0.01,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocabulary;
    use crate::pipeline::{build_pools, CandidateGenerator, PoolConfig};
    use std::collections::HashSet;

    #[test]
    fn corpus_has_expected_shape() {
        let corpus = build_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(corpus.instances.len(), 500);
        let ids: HashSet<&str> = corpus.instances.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), 500);
        let first = &corpus.instances[0];
        assert_eq!(first.id, "t00i000");
        assert_eq!(first.answer, "ans00");
        assert_eq!(first.gold_distractors, vec!["gd00a", "gd00b", "gd00c"]);
        assert_eq!(first.context.matches("[BLANK]").count(), 1);
        // Instances within a topic share everything except the id.
        assert_eq!(corpus.instances[1].context, first.context);
        assert_eq!(corpus.instances[1].answer, first.answer);
        // Topics do not share answers or golds.
        let other = &corpus.instances[25];
        assert_eq!(other.id, "t01i000");
        assert_ne!(other.answer, first.answer);
    }

    #[test]
    fn corpus_is_deterministic() {
        let config = SynthConfig {
            n_topics: 3,
            per_topic: 2,
        };
        let a = build_corpus(&config).unwrap();
        let b = build_corpus(&config).unwrap();
        assert_eq!(a.instances, b.instances);
        let exclude = HashSet::new();
        for instance in &a.instances {
            let ga = a.generator.generate(instance, 10, &exclude);
            let gb = b.generator.generate(instance, 10, &exclude);
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn script_offers_bait_golds_then_pads() {
        let corpus = build_corpus(&SynthConfig {
            n_topics: 2,
            per_topic: 1,
        })
        .unwrap();
        let instance = &corpus.instances[1];
        let got = corpus.generator.generate(instance, 10, &HashSet::new());
        let tokens: Vec<&str> = got.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(
            tokens,
            ["bait01", "gd01a", "gd01b", "gd01c", "pad0", "pad1", "pad2", "pad3", "pad4", "pad5"]
        );
        assert_eq!(got[0].confidence, 1.0);
        assert_eq!(got[1].confidence, 0.9);
        assert_eq!(got[4].confidence, 0.1);
    }

    #[test]
    fn pools_hold_bait_and_pads_only() {
        let corpus = build_corpus(&SynthConfig {
            n_topics: 2,
            per_topic: 2,
        })
        .unwrap();
        let pools = build_pools(&corpus.instances, &corpus.generator, &PoolConfig::default())
            .unwrap();
        assert_eq!(pools.len(), 4);
        let tokens: Vec<&str> = pools[0].generated.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(
            tokens,
            ["bait00", "pad0", "pad1", "pad2", "pad3", "pad4", "pad5"]
        );
        assert_eq!(pools[0].gold, vec!["gd00a", "gd00b", "gd00c"]);
        assert_eq!(pools[0].generated[0].confidence, 1.0);
        assert_eq!(pools[0].generated[1].confidence, 0.1);
    }

    #[test]
    fn vocabulary_covers_topics_bait_and_pads() {
        let corpus = build_corpus(&SynthConfig::default()).unwrap();
        let pools = build_pools(&corpus.instances, &corpus.generator, &PoolConfig::default())
            .unwrap();
        let extras: Vec<String> = pools
            .iter()
            .flat_map(|p| p.generated.iter().map(|c| c.token.clone()))
            .collect();
        let vocab = build_vocabulary(&corpus.instances, &extras);
        // 20 answers + 60 golds + 20 baits + 6 pads.
        assert_eq!(vocab.len(), 106);
        assert!(vocab.get("bait19").is_some());
        assert!(vocab.get("pad5").is_some());
    }

    #[test]
    fn degenerate_config_is_rejected() {
        assert!(build_corpus(&SynthConfig {
            n_topics: 0,
            per_topic: 5
        })
        .is_err());
    }
}
