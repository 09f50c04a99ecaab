//! Synthetic activity-sequence corpus for desk-scale experiments.
//!
//! Each video is a first-order Markov chain of activities. Every activity
//! owns a fixed token template and a feature class; each sentence gets a
//! 3-frame window of (optionally noised) one-hot features in an
//! `appearance` and a `motion` channel.
//!
//! In ambiguity mode the corpus is built so that frame features alone
//! cannot identify some sentences: the chain starts with one of two cue
//! activities and then repeats the matching member of an ambiguous pair
//! whose two activities share a feature class. A context-free captioner
//! must split its probability over the pair; a paragraph-aware one can
//! read the cue from the first sentence.

use serde::{Deserialize, Serialize};

use super::{build_vocabulary, ChannelFeatures, Corpus, Sentence, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const FRAMES_PER_SENTENCE: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub videos: usize,
    pub sentences_per_video: usize,
    pub activities: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub ambiguity: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos: 40,
            sentences_per_video: 4,
            activities: 10,
            feature_dim: 12,
            noise_sigma: 0.0,
            ambiguity: false,
            seed: 1,
        }
    }
}

/// Provenance stamped into generated corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMeta {
    pub generator: String,
    pub ambiguity: bool,
    pub seed: u64,
    pub activities: usize,
}

/// The exact generative process behind a [`SynthSpec`], exposed so tests
/// can compute Bayes-optimal predictions analytically.
#[derive(Debug, Clone)]
pub struct SynthModel {
    pub initial: Vec<f64>,
    /// transitions[a][b] = P(next = b | current = a)
    pub transitions: Vec<Vec<f64>>,
    /// Feature class per activity; distinct activities may share a class.
    pub feature_class: Vec<usize>,
    pub templates: Vec<Vec<String>>,
}

impl SynthModel {
    pub fn num_activities(&self) -> usize {
        self.initial.len()
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.videos == 0 || spec.sentences_per_video == 0 {
        return Err(Error::Config("synth corpus must be non-empty".into()));
    }
    if spec.ambiguity {
        if spec.activities < 4 {
            return Err(Error::Config(
                "ambiguity mode needs at least 4 activities (2 cues + 1 pair)".into(),
            ));
        }
        if spec.sentences_per_video < 2 {
            return Err(Error::Config(
                "ambiguity mode needs at least 2 sentences per video".into(),
            ));
        }
        if spec.feature_dim < 3 {
            return Err(Error::Config("ambiguity mode needs feature_dim >= 3".into()));
        }
    } else {
        if spec.activities == 0 {
            return Err(Error::Config("need at least one activity".into()));
        }
        if spec.feature_dim < spec.activities {
            return Err(Error::Config(format!(
                "feature_dim {} < activities {}; one-hot classes would collide",
                spec.feature_dim, spec.activities
            )));
        }
    }
    Ok(())
}

/// The Markov chain, feature classes, and templates implied by a spec.
pub fn synth_model(spec: &SynthSpec) -> Result<SynthModel> {
    validate(spec)?;
    if spec.ambiguity {
        // Activities: 0, 1 are cues; 2, 3 form the ambiguous pair and share
        // feature class 2. Cue a leads deterministically to pair member
        // 2 + a, which then self-loops; only the opening sentence
        // disambiguates the rest of the paragraph.
        let initial = vec![0.5, 0.5, 0.0, 0.0];
        let mut transitions = vec![vec![0.0; 4]; 4];
        transitions[0][2] = 1.0;
        transitions[1][3] = 1.0;
        transitions[2][2] = 1.0;
        transitions[3][3] = 1.0;
        let feature_class = vec![0, 1, 2, 2];
        let templates = vec![
            vec!["the".into(), "person".into(), "waves".into()],
            vec!["the".into(), "person".into(), "points".into()],
            vec!["the".into(), "person".into(), "paints".into()],
            vec!["the".into(), "person".into(), "carves".into()],
        ];
        Ok(SynthModel {
            initial,
            transitions,
            feature_class,
            templates,
        })
    } else {
        let a = spec.activities;
        let p = 1.0 / a as f64;
        Ok(SynthModel {
            initial: vec![p; a],
            transitions: vec![vec![p; a]; a],
            feature_class: (0..a).collect(),
            templates: (0..a)
                .map(|i| {
                    vec![
                        "the".into(),
                        "person".into(),
                        format!("v{i:02}"),
                        format!("o{i:02}"),
                    ]
                })
                .collect(),
        })
    }
}

fn sample(dist: &[f64], rng: &mut RngState) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Deterministic function of the spec: same spec, same corpus.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    let model = synth_model(spec)?;
    let mut rng = RngState::new(spec.seed);
    let mut records = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let mut activities = Vec::with_capacity(spec.sentences_per_video);
        let mut cur = sample(&model.initial, &mut rng);
        activities.push(cur);
        for _ in 1..spec.sentences_per_video {
            cur = sample(&model.transitions[cur], &mut rng);
            activities.push(cur);
        }

        let frames = spec.sentences_per_video * FRAMES_PER_SENTENCE;
        let mut channels = Vec::new();
        for name in ["appearance", "motion"] {
            let mut data = Vec::with_capacity(frames * spec.feature_dim);
            for &act in &activities {
                let class = model.feature_class[act];
                for _ in 0..FRAMES_PER_SENTENCE {
                    for d in 0..spec.feature_dim {
                        let base = if d == class { 1.0 } else { 0.0 };
                        data.push(base + spec.noise_sigma * rng.gaussian());
                    }
                }
            }
            channels.push((
                name.to_string(),
                ChannelFeatures {
                    frames,
                    patches: 1,
                    dim: spec.feature_dim,
                    data,
                },
            ));
        }

        let sentences = activities
            .iter()
            .enumerate()
            .map(|(k, &act)| Sentence {
                tokens: model.templates[act].clone(),
                word_ids: Vec::new(), // filled below once the vocab exists
                interval: Some((k * FRAMES_PER_SENTENCE, (k + 1) * FRAMES_PER_SENTENCE)),
            })
            .collect();
        records.push(VideoRecord {
            id: format!("v{v:04}"),
            channels,
            sentences,
        });
    }

    let vocab = build_vocabulary(
        model
            .templates
            .iter()
            .flatten()
            .map(String::as_str)
            .chain(
                records
                    .iter()
                    .flat_map(|r| &r.sentences)
                    .flat_map(|s| &s.tokens)
                    .map(String::as_str),
            ),
    );
    for r in &mut records {
        for s in &mut r.sentences {
            s.word_ids = vocab.encode_sentence(&s.tokens)?;
        }
    }

    Ok(Corpus {
        vocab,
        records,
        split: None,
        meta: Some(SynthMeta {
            generator: "synth".into(),
            ambiguity: spec.ambiguity,
            seed: spec.seed,
            activities: if spec.ambiguity { 4 } else { spec.activities },
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::save_corpus;

    #[test]
    fn same_spec_same_bytes() {
        let spec = SynthSpec {
            noise_sigma: 0.05,
            ..SynthSpec::default()
        };
        let a = synth_corpus(&spec).unwrap();
        let b = synth_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_corpus(&a, &pa).unwrap();
        save_corpus(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn different_seed_differs() {
        let a = synth_corpus(&SynthSpec::default()).unwrap();
        let b = synth_corpus(&SynthSpec {
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn noiseless_features_identify_sentences() {
        let spec = SynthSpec::default(); // noise_sigma = 0
        let model = synth_model(&spec).unwrap();
        let corpus = synth_corpus(&spec).unwrap();
        for rec in &corpus.records {
            let (_, app) = &rec.channels[0];
            for (k, sent) in rec.sentences.iter().enumerate() {
                // argmax of the first frame of the sentence's window
                // recovers the activity's feature class.
                let frame =
                    &app.data[k * FRAMES_PER_SENTENCE * app.dim..][..app.dim];
                let class = frame
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(sent.tokens, model.templates[class]);
            }
        }
    }

    #[test]
    fn ambiguity_pair_shares_features_but_not_tokens() {
        let spec = SynthSpec {
            videos: 200,
            sentences_per_video: 3,
            activities: 4,
            feature_dim: 5,
            ambiguity: true,
            ..SynthSpec::default()
        };
        let model = synth_model(&spec).unwrap();
        assert_eq!(model.feature_class[2], model.feature_class[3]);
        assert_ne!(model.templates[2], model.templates[3]);

        let corpus = synth_corpus(&spec).unwrap();
        let mut counts = [0usize; 2];
        for rec in &corpus.records {
            let cue = &rec.sentences[0].tokens;
            let follower = if cue == &model.templates[0] {
                counts[0] += 1;
                &model.templates[2]
            } else {
                assert_eq!(cue, &model.templates[1]);
                counts[1] += 1;
                &model.templates[3]
            };
            // Every later sentence is the cue-matched pair member, and its
            // feature window is identical in expectation to the other
            // member's: the class one-hot at index 2.
            for sent in &rec.sentences[1..] {
                assert_eq!(&sent.tokens, follower);
            }
            let (_, app) = &rec.channels[0];
            let frame = &app.data[FRAMES_PER_SENTENCE * app.dim..][..app.dim];
            assert_eq!(frame[2], 1.0);
        }
        // Both cues actually occur.
        assert!(counts[0] > 40 && counts[1] > 40, "{counts:?}");
    }

    #[test]
    fn transition_rows_are_distributions() {
        for spec in [
            SynthSpec::default(),
            SynthSpec {
                ambiguity: true,
                activities: 4,
                ..SynthSpec::default()
            },
        ] {
            let model = synth_model(&spec).unwrap();
            assert!((model.initial.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for row in &model.transitions {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(synth_corpus(&SynthSpec {
            videos: 0,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(synth_corpus(&SynthSpec {
            ambiguity: true,
            activities: 3,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(synth_corpus(&SynthSpec {
            activities: 20,
            feature_dim: 4,
            ..SynthSpec::default()
        })
        .is_err());
    }

    #[test]
    fn intervals_tile_the_video() {
        let corpus = synth_corpus(&SynthSpec::default()).unwrap();
        let rec = &corpus.records[0];
        let mut expect = 0;
        for s in &rec.sentences {
            let (a, b) = s.interval.unwrap();
            assert_eq!(a, expect);
            assert_eq!(b - a, FRAMES_PER_SENTENCE);
            expect = b;
        }
        assert_eq!(expect, rec.channels[0].1.frames);
    }
}
