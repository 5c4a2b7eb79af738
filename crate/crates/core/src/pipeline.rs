//! Per-instance tracing with any pattern extraction method, and the
//! on-disk trace file.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    pattern_attention_dp, pattern_conductance, pattern_internal_influence, pattern_random, AttentionTensorStack,
};
use crate::corpus::{qoi_spec, Instance, Vocab};
use crate::error::{Error, Result};
use crate::evalmetrics::TracedInstance;
use crate::gpr::{gpr_attention, gpr_embedding};
use crate::graph::{Granularity, Pattern, PatternCollection, Sign};
use crate::influence::{Attributions, DoIConfig, Query, Tracer, WordAttribution};
use crate::transformer::{ForwardOptions, NodeId, ToyTransformer};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gpr")]
    Gpr,
    #[serde(rename = "rand")]
    Random,
    #[serde(rename = "attn")]
    Attention,
    #[serde(rename = "cond")]
    Conductance,
    #[serde(rename = "inf")]
    InternalInfluence,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gpr,
        Method::Conductance,
        Method::InternalInfluence,
        Method::Attention,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gpr => "gpr",
            Method::Random => "rand",
            Method::Attention => "attn",
            Method::Conductance => "cond",
            Method::InternalInfluence => "inf",
        }
    }

    /// The attention-weight baseline only produces embedding-level patterns.
    pub fn supports(self, granularity: Granularity) -> bool {
        !(self == Method::Attention && granularity == Granularity::Attention)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown method `{s}` (expected gpr, rand, attn, cond or inf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    pub method: Method,
    pub granularity: Granularity,
    pub doi: DoIConfig,
    pub seed: u64,
    /// Use `0.5 I + 0.5 W` matrices in the attention baseline.
    #[serde(default)]
    pub rollout: bool,
    /// Interpolate one word at a time (others held at their embeddings)
    /// instead of moving every content word jointly.
    #[serde(default)]
    pub per_word: bool,
}

impl TraceSettings {
    pub fn new(method: Method, granularity: Granularity) -> Self {
        Self {
            method,
            granularity,
            doi: DoIConfig::default(),
            seed: 0,
            rollout: false,
            per_word: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.method.supports(self.granularity) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "method `{}` is embedding-level only",
                self.method
            )))
        }
    }
}

/// Query over the content words of `inst`, baselined at the mask embedding.
pub fn instance_query(model: &ToyTransformer, vocab: &Vocab, inst: &Instance) -> Result<Query> {
    Query::new(
        model,
        inst.ids.clone(),
        qoi_spec(inst),
        vocab.mask_id(),
        inst.content_positions(vocab),
    )
}

fn skeleton(word: usize, layers: usize, mask: usize, attribution: f64) -> Pattern {
    let mut nodes = vec![NodeId::Input { pos: word }];
    nodes.extend((1..=layers).map(|l| NodeId::Layer { layer: l, pos: mask }));
    nodes.push(NodeId::Qoi);
    Pattern {
        nodes,
        influence: 0.0,
        word_index: word,
        sign_tag: Sign::of(attribution),
        attribution,
    }
}

/// Extracts one pattern per content word of `inst`. `index` selects the
/// random stream so results do not depend on scheduling.
pub fn trace_instance(
    model: &ToyTransformer,
    vocab: &Vocab,
    inst: &Instance,
    index: usize,
    settings: &TraceSettings,
) -> Result<TracedInstance> {
    settings.check()?;
    let query = instance_query(model, vocab, inst)?;
    let positions = inst.guiding_positions(vocab);
    let cfg = &model.config;
    let stack = AttentionTensorStack::from_trace(&model.forward(
        &inst.ids,
        &ForwardOptions {
            eager: true,
            ..Default::default()
        },
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(index as u64);
    let mut collection = PatternCollection::new(settings.granularity);
    let mut words = Vec::new();
    let mut degenerate = true;
    let mut extract = |tracer: &mut Tracer<'_>, w: &WordAttribution, rng: &mut ChaCha8Rng| -> Result<()> {
        let (word, attr) = (w.position, w.attribution);
        let mut p = match settings.method {
            Method::Gpr => {
                let e = gpr_embedding(tracer, word, attr, &positions)?;
                if settings.granularity == Granularity::Attention {
                    gpr_attention(tracer, &e)?
                } else {
                    e
                }
            }
            Method::Conductance => pattern_conductance(tracer, word, attr, &positions, settings.granularity)?,
            Method::InternalInfluence => {
                pattern_internal_influence(tracer, word, attr, &positions, settings.granularity)?
            }
            Method::Random => pattern_random(
                &skeleton(word, cfg.layers, inst.mask_pos, attr),
                settings.granularity,
                cfg.layers,
                cfg.heads,
                &positions,
                rng,
            )?,
            Method::Attention => pattern_attention_dp(&stack, word, inst.mask_pos, settings.rollout)?,
        };
        p.influence = tracer.pattern_influence(&p.nodes)?;
        p.word_index = word;
        p.attribution = attr;
        p.sign_tag = Sign::of(attr);
        collection.patterns.push(p);
        Ok(())
    };
    if settings.per_word {
        for &pos in &query.traced {
            let q = Query {
                traced: vec![pos],
                ..query.clone()
            };
            let mut tracer = Tracer::new(model, q, &settings.doi)?;
            let a = tracer.attributions()?;
            degenerate &= a.degenerate;
            for w in &a.words {
                extract(&mut tracer, w, &mut rng)?;
            }
            words.extend(a.words);
        }
    } else {
        let mut tracer = Tracer::new(model, query, &settings.doi)?;
        let a = tracer.attributions()?;
        degenerate = a.degenerate;
        for w in &a.words {
            extract(&mut tracer, w, &mut rng)?;
        }
        words = a.words;
    }
    let attributions = Attributions { words, degenerate };
    Ok(TracedInstance {
        instance: inst.clone(),
        collection,
        attributions,
        stack: Some(stack),
    })
}

/// Word-level attribution as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub position: usize,
    pub token: String,
    pub attribution: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub instance: Instance,
    pub words: Vec<WordRecord>,
    pub patterns: Vec<Pattern>,
}

/// Output of one tracing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub schema_version: u32,
    pub settings: TraceSettings,
    pub instances: Vec<InstanceRecord>,
}

impl TraceFile {
    pub fn new(settings: TraceSettings, vocab: &Vocab, traced: &[TracedInstance]) -> Result<Self> {
        let instances = traced
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let words = t
                    .attributions
                    .words
                    .iter()
                    .map(|w| {
                        Ok(WordRecord {
                            position: w.position,
                            token: vocab.token(t.instance.ids[w.position])?.to_string(),
                            attribution: w.attribution,
                            sign: w.sign,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(InstanceRecord {
                    index,
                    instance: t.instance.clone(),
                    words,
                    patterns: t.collection.patterns.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema_version: TRACE_SCHEMA_VERSION,
            settings,
            instances,
        })
    }

    /// Parses and checks the schema version.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(s) if s == TRACE_SCHEMA_VERSION as u64 => {}
            Some(s) => {
                return Err(Error::Schema {
                    path: "schema_version".into(),
                    msg: format!("expected {TRACE_SCHEMA_VERSION}, found {s}"),
                })
            }
            None => {
                return Err(Error::Schema {
                    path: "schema_version".into(),
                    msg: "missing".into(),
                })
            }
        }
        serde_path_to_error::deserialize(v).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rebuilds the traced instances; attention stacks come from `model`.
    pub fn traced(&self, model: &ToyTransformer) -> Result<Vec<TracedInstance>> {
        self.instances
            .iter()
            .map(|r| {
                let trace = model.forward(
                    &r.instance.ids,
                    &ForwardOptions {
                        eager: true,
                        ..Default::default()
                    },
                )?;
                Ok(TracedInstance {
                    instance: r.instance.clone(),
                    collection: PatternCollection {
                        granularity: self.settings.granularity,
                        patterns: r.patterns.clone(),
                    },
                    attributions: Attributions {
                        words: r
                            .words
                            .iter()
                            .map(|w| WordAttribution {
                                position: w.position,
                                raw_gradient: Vec::new(),
                                attribution: w.attribution,
                                sign: w.sign,
                            })
                            .collect(),
                        degenerate: false,
                    },
                    stack: Some(AttentionTensorStack::from_trace(&trace)),
                })
            })
            .collect()
    }
}
