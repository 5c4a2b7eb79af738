use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 4] = [PAD, CLS, SEP, MASK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Number {
    Singular,
    Plural,
}

/// Subject/attractor number combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseTag {
    SS,
    SP,
    PS,
    PP,
}

impl CaseTag {
    pub const ALL: [CaseTag; 4] = [CaseTag::SS, CaseTag::SP, CaseTag::PS, CaseTag::PP];

    pub fn subject(self) -> Number {
        match self {
            CaseTag::SS | CaseTag::SP => Number::Singular,
            CaseTag::PS | CaseTag::PP => Number::Plural,
        }
    }

    pub fn attractor(self) -> Number {
        match self {
            CaseTag::SS | CaseTag::PS => Number::Singular,
            CaseTag::SP | CaseTag::PP => Number::Plural,
        }
    }
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for CaseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS" => Ok(CaseTag::SS),
            "SP" => Ok(CaseTag::SP),
            "PS" => Ok(CaseTag::PS),
            "PP" => Ok(CaseTag::PP),
            other => Err(Error::Input(format!("unknown case tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Word(String),
    Subject,
    Attractor,
    /// Clausal verb, agreeing with the attractor.
    Verb,
    Mask,
    Adjective,
}

/// Singular/plural pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inflected {
    pub singular: String,
    pub plural: String,
}

impl Inflected {
    pub fn new(singular: &str, plural: &str) -> Self {
        Self {
            singular: singular.into(),
            plural: plural.into(),
        }
    }

    pub fn get(&self, n: Number) -> &str {
        match n {
            Number::Singular => &self.singular,
            Number::Plural => &self.plural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub slots: Vec<Slot>,
    pub nouns: Vec<Inflected>,
    pub verbs: Vec<Inflected>,
    pub adjectives: Vec<String>,
    /// Mask fillers for a singular and a plural subject.
    pub targets: Inflected,
}

impl Template {
    /// `[CLS] the SUBJ that the ATTR VERB [MASK] ADJ . [SEP]`
    pub fn sva_obj() -> Self {
        let w = |s: &str| Slot::Word(s.into());
        Self {
            name: "sva_obj".into(),
            slots: vec![
                w(CLS),
                w("the"),
                Slot::Subject,
                w("that"),
                w("the"),
                Slot::Attractor,
                Slot::Verb,
                Slot::Mask,
                Slot::Adjective,
                w("."),
                w(SEP),
            ],
            nouns: vec![
                Inflected::new("author", "authors"),
                Inflected::new("pilot", "pilots"),
                Inflected::new("surgeon", "surgeons"),
                Inflected::new("farmer", "farmers"),
                Inflected::new("manager", "managers"),
                Inflected::new("senator", "senators"),
            ],
            verbs: vec![
                Inflected::new("likes", "like"),
                Inflected::new("loves", "love"),
                Inflected::new("hates", "hate"),
                Inflected::new("admires", "admire"),
            ],
            adjectives: vec!["young".into(), "old".into(), "tall".into(), "happy".into()],
            targets: Inflected::new("is", "are"),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn mask_position(&self) -> Result<usize> {
        let masks: Vec<usize> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Slot::Mask)
            .map(|(i, _)| i)
            .collect();
        match masks.as_slice() {
            [m] => Ok(*m),
            _ => Err(Error::Config(format!(
                "template `{}` needs exactly one mask slot",
                self.name
            ))),
        }
    }

    /// Specials first, then every word in slot and list order.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for s in &self.slots {
            if let Slot::Word(w) = s {
                words.push(w.clone());
            }
        }
        for n in self.nouns.iter().chain(&self.verbs).chain(std::iter::once(&self.targets)) {
            words.push(n.singular.clone());
            words.push(n.plural.clone());
        }
        words.extend(self.adjectives.iter().cloned());
        Vocab::new(words)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Duplicates keep their first id.
    pub fn new(words: Vec<String>) -> Self {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown token `{token}`")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("unknown token id {id}")))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_id(&self) -> usize {
        self.index[MASK]
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.tokens
            .get(id)
            .is_some_and(|t| SPECIALS.contains(&t.as_str()))
    }

    /// Whitespace tokenization.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub ids: Vec<usize>,
    pub mask_pos: usize,
    pub correct: usize,
    pub wrong: usize,
    pub case: CaseTag,
}

impl Instance {
    /// Positions holding non-special tokens.
    pub fn content_positions(&self, vocab: &Vocab) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&p| !vocab.is_special(self.ids[p]))
            .collect()
    }

    /// Every position except padding.
    pub fn guiding_positions(&self, vocab: &Vocab) -> Vec<usize> {
        let pad = vocab.id(PAD).ok();
        (0..self.ids.len()).filter(|&p| Some(self.ids[p]) != pad).collect()
    }
}

/// `n` instances with case tags cycling SS, SP, PS, PP; subject and
/// attractor lemmas always differ.
pub fn sample_instances(template: &Template, n: usize, seed: u64) -> Result<Vec<Instance>> {
    if n < 4 {
        return Err(Error::Config("need at least 4 instances for case balance".into()));
    }
    if template.nouns.len() < 2 || template.verbs.is_empty() || template.adjectives.is_empty() {
        return Err(Error::Config(
            "template needs two nouns, one verb and one adjective".into(),
        ));
    }
    let vocab = template.vocab();
    let mask_pos = template.mask_position()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lemmas: Vec<usize> = (0..template.nouns.len()).collect();
    (0..n)
        .map(|i| {
            let case = CaseTag::ALL[i % 4];
            let pair: Vec<usize> = lemmas.choose_multiple(&mut rng, 2).copied().collect();
            let subj = template.nouns[pair[0]].get(case.subject());
            let attr = template.nouns[pair[1]].get(case.attractor());
            let verb = template.verbs.choose(&mut rng).expect("non-empty").get(case.attractor());
            let adj = template.adjectives.choose(&mut rng).expect("non-empty");
            let ids = template
                .slots
                .iter()
                .map(|s| {
                    vocab.id(match s {
                        Slot::Word(w) => w,
                        Slot::Subject => subj,
                        Slot::Attractor => attr,
                        Slot::Verb => verb,
                        Slot::Mask => MASK,
                        Slot::Adjective => adj,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let correct = vocab.id(template.targets.get(case.subject()))?;
            let wrong = vocab.id(template.targets.get(match case.subject() {
                Number::Singular => Number::Plural,
                Number::Plural => Number::Singular,
            }))?;
            Ok(Instance {
                ids,
                mask_pos,
                correct,
                wrong,
                case,
            })
        })
        .collect()
}

const TSV_HEADER: &str = "# ids\tmask_pos\tcorrect\twrong\tcase";

/// One instance per line: space-separated ids, mask position, correct id,
/// wrong id and case tag, tab-separated.
pub fn write_corpus(instances: &[Instance]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for inst in instances {
        let ids: Vec<String> = inst.ids.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            ids.join(" "),
            inst.mask_pos,
            inst.correct,
            inst.wrong,
            inst.case
        ));
    }
    out
}

pub fn read_corpus(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Schema {
            path: format!("line {}", ln + 1),
            msg: msg.into(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("expected an integer"));
        let ids = cols[0]
            .split_whitespace()
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        let inst = Instance {
            mask_pos: num(cols[1])?,
            correct: num(cols[2])?,
            wrong: num(cols[3])?,
            case: cols[4].trim().parse().map_err(|_| bad("unknown case tag"))?,
            ids,
        };
        if inst.mask_pos >= inst.ids.len() || inst.correct == inst.wrong {
            return Err(bad("inconsistent mask position or targets"));
        }
        out.push(inst);
    }
    Ok(out)
}
