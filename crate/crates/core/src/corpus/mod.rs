//! Data model and I/O for feature-sequence corpora, vocabulary
//! construction, the synthetic corpus generator used for desk-scale
//! validation, and the BLEU scorer.

mod bleu;
mod synth;

pub use bleu::{bleu, bleu_smoothed};
pub use synth::{synth_corpus, synth_model, SynthMeta, SynthModel, SynthSpec};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sentence_generator::FeaturePools;

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Word <-> id bijection with BOS and EOS at fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from an ordered token list; BOS and EOS must sit at ids 0/1.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 2 || tokens[0] != BOS_TOKEN || tokens[1] != EOS_TOKEN {
            return Err(Error::Corpus(format!(
                "vocabulary must start with {BOS_TOKEN:?}, {EOS_TOKEN:?}"
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Wrap a token sentence in BOS/EOS word ids.
    pub fn encode_sentence(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS_ID);
        for t in tokens {
            match self.id(t) {
                Some(id) => ids.push(id),
                None => return Err(Error::Corpus(format!("unknown token {t:?}"))),
            }
        }
        ids.push(EOS_ID);
        Ok(ids)
    }
}

/// Deterministic vocabulary assignment: BOS=0, EOS=1, then all distinct
/// tokens sorted by (frequency desc, token asc).
pub fn build_vocabulary<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        if t == BOS_TOKEN || t == EOS_TOKEN {
            continue;
        }
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
    tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens).expect("constructed tokens are valid")
}

/// One feature channel of a video: M frames x K patches x dim floats,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeatures {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ChannelFeatures {
    /// Flatten frames [start, end) into a pool tensor of shape
    /// ((end-start)*K x dim).
    pub fn pool(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.frames {
            return Err(Error::Corpus(format!(
                "interval [{start}, {end}) outside feature range of {} frames",
                self.frames
            )));
        }
        let row = self.patches * self.dim;
        let data = self.data[start * row..end * row].to_vec();
        Tensor::from_vec(&[(end - start) * self.patches, self.dim], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    /// Word ids including the surrounding BOS/EOS.
    pub word_ids: Vec<usize>,
    pub interval: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Sorted by channel name for deterministic serialization.
    pub channels: Vec<(String, ChannelFeatures)>,
    pub sentences: Vec<Sentence>,
}

impl VideoRecord {
    pub fn channel(&self, name: &str) -> Result<&ChannelFeatures> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| {
                Error::Corpus(format!("record {:?} has no channel {name:?}", self.id))
            })
    }

    /// Feature pools for one sentence: the given frame interval, or the
    /// whole video when none is present.
    pub fn pools(&self, interval: Option<(usize, usize)>) -> Result<FeaturePools> {
        let mut channels = Vec::with_capacity(self.channels.len());
        for (name, feats) in &self.channels {
            let (s, e) = interval.unwrap_or((0, feats.frames));
            let pool = feats.pool(s, e).map_err(|err| {
                Error::Corpus(format!("record {:?}, channel {name:?}: {err}", self.id))
            })?;
            channels.push((name.clone(), pool));
        }
        Ok(FeaturePools { channels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub records: Vec<VideoRecord>,
    pub split: Option<String>,
    pub meta: Option<SynthMeta>,
}

impl Corpus {
    pub fn total_words(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| &r.sentences)
            .map(|s| s.word_ids.len() - 1)
            .sum()
    }
}

// --- JSON wire format -----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    vocab: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    meta: Option<SynthMeta>,
    records: Vec<RecordFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    id: String,
    channels: BTreeMap<String, ChannelFile>,
    sentences: Vec<SentenceFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelFile {
    /// [M frames, K patches, dim]
    shape: [usize; 3],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SentenceFile {
    tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    interval: Option<[usize; 2]>,
}

/// Parse and fully validate a corpus file. When the file carries no `vocab`
/// list, the vocabulary is built from the records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: CorpusFile = serde_json::from_str(&text)?;
    corpus_from_file(file)
}

fn corpus_from_file(file: CorpusFile) -> Result<Corpus> {
    let vocab = match file.vocab {
        Some(tokens) => Vocabulary::from_tokens(tokens)?,
        None => build_vocabulary(
            file.records
                .iter()
                .flat_map(|r| &r.sentences)
                .flat_map(|s| &s.tokens)
                .map(String::as_str),
        ),
    };

    let mut seen = HashMap::new();
    let mut records = Vec::with_capacity(file.records.len());
    for rec in file.records {
        if seen.insert(rec.id.clone(), ()).is_some() {
            return Err(Error::Corpus(format!("duplicate record id {:?}", rec.id)));
        }
        let mut channels = Vec::with_capacity(rec.channels.len());
        for (name, ch) in rec.channels {
            let [frames, patches, dim] = ch.shape;
            if frames * patches * dim != ch.data.len() {
                return Err(Error::Corpus(format!(
                    "record {:?}, channel {name:?}: shape {:?} does not match {} floats",
                    rec.id,
                    ch.shape,
                    ch.data.len()
                )));
            }
            if frames == 0 || patches == 0 || dim == 0 {
                return Err(Error::Corpus(format!(
                    "record {:?}, channel {name:?}: empty feature dimension in {:?}",
                    rec.id, ch.shape
                )));
            }
            channels.push((
                name,
                ChannelFeatures {
                    frames,
                    patches,
                    dim,
                    data: ch.data,
                },
            ));
        }
        if channels.is_empty() {
            return Err(Error::Corpus(format!(
                "record {:?} has no feature channels",
                rec.id
            )));
        }

        let mut sentences = Vec::with_capacity(rec.sentences.len());
        let mut prev_start = 0usize;
        for (i, s) in rec.sentences.into_iter().enumerate() {
            let unknown: Vec<&String> =
                s.tokens.iter().filter(|t| vocab.id(t).is_none()).collect();
            if !unknown.is_empty() {
                return Err(Error::Corpus(format!(
                    "record {:?}, sentence {i}: unknown tokens {unknown:?}",
                    rec.id
                )));
            }
            let interval = match s.interval {
                Some([start, end]) => {
                    if start >= end {
                        return Err(Error::Corpus(format!(
                            "record {:?}, sentence {i}: empty interval [{start}, {end})",
                            rec.id
                        )));
                    }
                    if start < prev_start {
                        return Err(Error::Corpus(format!(
                            "record {:?}, sentence {i}: intervals out of order",
                            rec.id
                        )));
                    }
                    for (name, ch) in &channels {
                        if end > ch.frames {
                            return Err(Error::Corpus(format!(
                                "record {:?}, sentence {i}: interval end {end} beyond \
                                 {} frames of channel {name:?}",
                                rec.id, ch.frames
                            )));
                        }
                    }
                    prev_start = start;
                    Some((start, end))
                }
                None => None,
            };
            let word_ids = vocab.encode_sentence(&s.tokens).map_err(|e| {
                Error::Corpus(format!("record {:?}, sentence {i}: {e}", rec.id))
            })?;
            sentences.push(Sentence {
                tokens: s.tokens,
                word_ids,
                interval,
            });
        }
        if sentences.is_empty() {
            return Err(Error::Corpus(format!(
                "record {:?} has no sentences",
                rec.id
            )));
        }
        records.push(VideoRecord {
            id: rec.id,
            channels,
            sentences,
        });
    }
    Ok(Corpus {
        vocab,
        records,
        split: file.split,
        meta: file.meta,
    })
}

/// Canonical JSON serialization; load ∘ save is the identity on validated
/// corpora and save ∘ load ∘ save is byte-identical.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = CorpusFile {
        vocab: Some(corpus.vocab.tokens().to_vec()),
        split: corpus.split.clone(),
        meta: corpus.meta.clone(),
        records: corpus
            .records
            .iter()
            .map(|r| RecordFile {
                id: r.id.clone(),
                channels: r
                    .channels
                    .iter()
                    .map(|(name, ch)| {
                        (
                            name.clone(),
                            ChannelFile {
                                shape: [ch.frames, ch.patches, ch.dim],
                                data: ch.data.clone(),
                            },
                        )
                    })
                    .collect(),
                sentences: r
                    .sentences
                    .iter()
                    .map(|s| SentenceFile {
                        tokens: s.tokens.clone(),
                        interval: s.interval.map(|(a, b)| [a, b]),
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}
