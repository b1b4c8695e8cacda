// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template tasks with clean / corrupted example pairs.
//!
//! Every task enumerates a finite product space of (template, fillers)
//! combinations. Splits are a seeded partition of that space, so they are
//! disjoint by construction. Within one task all templates have the same
//! number of words, which keeps batches rectangular.

mod train;
mod vocab;

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use train::{task_accuracy, train_toy_lm, TrainConfig, TrainReport};
pub use vocab::{Vocab, BOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Ioi,
    GreaterThan,
    GenderedPronoun,
    Boolean,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ioi => "ioi",
            Self::GreaterThan => "greater-than",
            Self::GenderedPronoun => "gendered-pronoun",
            Self::Boolean => "boolean",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ioi" => Ok(Self::Ioi),
            "greater-than" | "gt" => Ok(Self::GreaterThan),
            "gendered-pronoun" | "gp" => Ok(Self::GenderedPronoun),
            "boolean" => Ok(Self::Boolean),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// A clean input and its corrupted counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub clean_text: String,
    pub corrupted_text: String,
    pub clean_tokens: Vec<u32>,
    pub corrupted_tokens: Vec<u32>,
    pub answer: String,
    pub answer_id: u32,
    #[serde(default)]
    pub misleading_id: Option<u32>,
    pub answer_position: usize,
    pub template_id: usize,
    /// Start-year suffix for greater-than examples.
    #[serde(default)]
    pub year: Option<u32>,
}

impl ExamplePair {
    pub fn check(&self) -> Result<()> {
        if self.clean_tokens.len() != self.corrupted_tokens.len() {
            return Err(Error::Dataset("clean and corrupted lengths differ".into()));
        }
        if self.answer_position >= self.clean_tokens.len() {
            return Err(Error::Dataset("answer position past the end".into()));
        }
        Ok(())
    }
}

/// Split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Splits {
    pub const IOI: Splits = Splits {
        train: 200,
        validation: 200,
        test: 200,
    };
    pub const GREATER_THAN: Splits = Splits {
        train: 150,
        validation: 150,
        test: 300,
    };
    pub const GENDERED_PRONOUN: Splits = Splits {
        train: 150,
        validation: 150,
        test: 300,
    };

    fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

pub const IOI_NAMES: [&str; 40] = [
    "Juana", "Kristi", "Mary", "John", "Tom", "James", "Anna", "Paul", "Laura", "Mark", "Sarah", "David", "Emma",
    "Peter", "Alice", "Henry", "Grace", "Oscar", "Clara", "Victor", "Nina", "Hugo", "Rosa", "Ivan", "Lucy", "Simon",
    "Elena", "Felix", "Maya", "Leon", "Iris", "Jonas", "Vera", "Ethan", "Zoe", "Oliver", "Ruth", "Adam", "Julia",
    "Kevin",
];

pub const BOY_NAMES: [&str; 30] = [
    "Evan",
    "Jacob",
    "Michael",
    "Joshua",
    "Matthew",
    "Daniel",
    "Christopher",
    "Andrew",
    "Ethan",
    "Joseph",
    "William",
    "Anthony",
    "Ryan",
    "Nicholas",
    "David",
    "Tyler",
    "Alexander",
    "John",
    "James",
    "Dylan",
    "Zachary",
    "Brandon",
    "Jonathan",
    "Samuel",
    "Christian",
    "Benjamin",
    "Justin",
    "Nathan",
    "Logan",
    "Jose",
];

pub const GIRL_NAMES: [&str; 30] = [
    "Emily",
    "Hannah",
    "Madison",
    "Ashley",
    "Sarah",
    "Alexis",
    "Samantha",
    "Jessica",
    "Elizabeth",
    "Taylor",
    "Lauren",
    "Alyssa",
    "Kayla",
    "Abigail",
    "Brianna",
    "Olivia",
    "Emma",
    "Megan",
    "Grace",
    "Victoria",
    "Rachel",
    "Anna",
    "Sydney",
    "Destiny",
    "Morgan",
    "Jennifer",
    "Jasmine",
    "Haley",
    "Julia",
    "Kaitlyn",
];

const IOI_TEMPLATES: [&str; 5] = [
    "Friends {A} and {B} found a mango at the bar . {S} gave it to",
    "Then {A} and {B} went to the park today . {S} handed a ball to",
    "When {A} and {B} got a drink at the cafe , {S} passed it to",
    "After {A} and {B} met up at the office yesterday , {S} sent notes to",
    "While {A} and {B} were working at the school , {S} showed a book to",
];

const GT_TEMPLATES: [&str; 5] = [
    "The {N} lasted from the year {C} {Y} to the year {C}",
    "The {N} started in the year {C} {Y} and ended in {C}",
    "The {N} began in the year {C} {Y} and ran until {C}",
    "The {N} continued from the year {C} {Y} through the year {C}",
    "The {N} was ongoing from the year {C} {Y} until year {C}",
];

const GT_NOUNS: [&str; 10] = [
    "war",
    "expedition",
    "drought",
    "famine",
    "dynasty",
    "pilgrimage",
    "occupation",
    "voyage",
    "blockade",
    "rebellion",
];

const GP_TEMPLATES: [&str; 5] = [
    "So {N} is a really {J} friend , isn't",
    "Well {N} is such a {J} person , isn't",
    "Yes {N} is a very {J} neighbor , isn't",
    "Honestly {N} is an incredibly {J} colleague , isn't",
    "Surely {N} is a truly {J} teacher , isn't",
];

const GP_ADJECTIVES: [&str; 10] = [
    "great", "kind", "good", "funny", "smart", "loyal", "honest", "patient", "clever", "brave",
];

const BOOL_OPERANDS: usize = 5;

/// Generator parameters of a task: everything needed to enumerate its
/// product space and to build any member of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TaskSpec {
    Ioi { n_templates: usize, names: Vec<String> },
    GreaterThan { n_templates: usize },
    GenderedPronoun { boys: Vec<String>, girls: Vec<String> },
    Boolean,
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

impl TaskSpec {
    pub fn ioi(n_templates: usize, n_names: usize) -> Self {
        Self::Ioi {
            n_templates,
            names: IOI_NAMES.iter().take(n_names).map(|s| s.to_string()).collect(),
        }
    }

    pub fn greater_than() -> Self {
        Self::GreaterThan { n_templates: 5 }
    }

    pub fn gendered_pronoun() -> Self {
        Self::GenderedPronoun {
            boys: BOY_NAMES.iter().map(|s| s.to_string()).collect(),
            girls: GIRL_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Ioi { .. } => TaskKind::Ioi,
            Self::GreaterThan { .. } => TaskKind::GreaterThan,
            Self::GenderedPronoun { .. } => TaskKind::GenderedPronoun,
            Self::Boolean => TaskKind::Boolean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Ioi { n_templates, names } => {
                if names.len() < 3 {
                    return Err(Error::Config("IOI needs at least 3 names".into()));
                }
                if *n_templates == 0 || *n_templates > IOI_TEMPLATES.len() {
                    return Err(Error::Config(format!(
                        "IOI supports 1..={} templates",
                        IOI_TEMPLATES.len()
                    )));
                }
            }
            Self::GreaterThan { n_templates } => {
                if *n_templates == 0 || *n_templates > GT_TEMPLATES.len() {
                    return Err(Error::Config(format!(
                        "greater-than supports 1..={} templates",
                        GT_TEMPLATES.len()
                    )));
                }
            }
            Self::GenderedPronoun { boys, girls } => {
                if boys.is_empty() || girls.is_empty() {
                    return Err(Error::Config("gendered-pronoun needs both name lists".into()));
                }
            }
            Self::Boolean => {}
        }
        Ok(())
    }

    /// Words this task can emit, in a fixed order.
    fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let split = |t: &str| -> Vec<String> {
            t.split_whitespace()
                .filter(|w| !w.starts_with('{'))
                .map(str::to_string)
                .collect()
        };
        match self {
            Self::Ioi { names, .. } => {
                IOI_TEMPLATES.iter().for_each(|t| out.extend(split(t)));
                out.extend(names.iter().cloned());
            }
            Self::GreaterThan { .. } => {
                out.extend((0..100).map(|y| format!("{y:02}")));
                GT_TEMPLATES.iter().for_each(|t| out.extend(split(t)));
                out.extend(GT_NOUNS.iter().map(|s| s.to_string()));
            }
            Self::GenderedPronoun { boys, girls } => {
                GP_TEMPLATES.iter().for_each(|t| out.extend(split(t)));
                out.extend(GP_ADJECTIVES.iter().map(|s| s.to_string()));
                out.extend(["he", "she"].map(str::to_string));
                out.extend(boys.iter().cloned());
                out.extend(girls.iter().cloned());
            }
            Self::Boolean => {
                out.extend(["true", "false", "and", "or", "is"].map(str::to_string));
            }
        }
        out
    }

    pub fn vocab(&self) -> Vocab {
        let words = self.words();
        Vocab::new(words.iter().map(String::as_str))
    }

    /// Size of the (template × fillers) product space.
    pub fn combo_count(&self) -> usize {
        match self {
            Self::Ioi { n_templates, names } => n_templates * names.len() * (names.len() - 1) * 2,
            // start years 02..=98, centuries 11..=21
            Self::GreaterThan { n_templates } => n_templates * GT_NOUNS.len() * 97 * 11,
            Self::GenderedPronoun { boys, girls } => {
                GP_TEMPLATES.len() * GP_ADJECTIVES.len() * (boys.len() + girls.len())
            }
            Self::Boolean => (1 << BOOL_OPERANDS) << (BOOL_OPERANDS - 1),
        }
    }

    /// Builds combination `idx`; `rng` drives only the corruption.
    pub fn example<R: Rng>(&self, vocab: &Vocab, idx: usize, rng: &mut R) -> Result<ExamplePair> {
        let (clean, corrupted, answer, misleading, template_id, year) = match self {
            Self::Ioi { n_templates, names } => {
                let p = names.len();
                let t = idx % n_templates;
                let r = idx / n_templates;
                let (abba, pair) = (r.is_multiple_of(2), r / 2);
                let (a, mut b) = (pair / (p - 1), pair % (p - 1));
                if b >= a {
                    b += 1;
                }
                let build = |a: usize, b: usize, abba: bool| {
                    let (s, io) = if abba { (b, a) } else { (a, b) };
                    let text = fill(
                        IOI_TEMPLATES[t],
                        &[
                            ("A", names[a].as_str()),
                            ("B", names[b].as_str()),
                            ("S", names[s].as_str()),
                        ],
                    );
                    (text, io, s)
                };
                let (clean, io, s) = build(a, b, abba);
                // Same template, names of another random example with a different answer.
                let corrupted = loop {
                    let a2 = rng.random_range(0..p);
                    let b2 = rng.random_range(0..p);
                    if a2 == b2 {
                        continue;
                    }
                    let (text, io2, _) = build(a2, b2, rng.random_bool(0.5));
                    if io2 != io {
                        break text;
                    }
                };
                (clean, corrupted, names[io].clone(), Some(names[s].clone()), t, None)
            }
            Self::GreaterThan { n_templates } => {
                let t = idx % n_templates;
                let r = idx / n_templates;
                let noun = GT_NOUNS[r % GT_NOUNS.len()];
                let r = r / GT_NOUNS.len();
                let yy = (r % 97 + 2) as u32;
                let century = format!("{:02}", r / 97 + 11);
                let build = |y: u32| {
                    fill(
                        GT_TEMPLATES[t],
                        &[("N", noun), ("C", century.as_str()), ("Y", format!("{y:02}").as_str())],
                    )
                };
                let other = loop {
                    let y = rng.random_range(2..=98u32);
                    if y != yy {
                        break y;
                    }
                };
                let answer = format!("{:02}", yy + 1);
                (build(yy), build(other), answer, None, t, Some(yy))
            }
            Self::GenderedPronoun { boys, girls } => {
                let t = idx % GP_TEMPLATES.len();
                let r = idx / GP_TEMPLATES.len();
                let adj = GP_ADJECTIVES[r % GP_ADJECTIVES.len()];
                let n = r / GP_ADJECTIVES.len();
                let (name, is_boy) = if n < boys.len() {
                    (&boys[n], true)
                } else {
                    (&girls[n - boys.len()], false)
                };
                let other_list = if is_boy { girls } else { boys };
                let other = &other_list[rng.random_range(0..other_list.len())];
                let build = |nm: &str| fill(GP_TEMPLATES[t], &[("N", nm), ("J", adj)]);
                let (ans, mis) = if is_boy { ("he", "she") } else { ("she", "he") };
                (
                    build(name),
                    build(other),
                    ans.to_string(),
                    Some(mis.to_string()),
                    t,
                    None,
                )
            }
            Self::Boolean => {
                let values = idx & ((1 << BOOL_OPERANDS) - 1);
                let ops = idx >> BOOL_OPERANDS;
                let eval = |v: usize| {
                    let mut acc = v & 1 == 1;
                    for k in 1..BOOL_OPERANDS {
                        let bit = (v >> k) & 1 == 1;
                        acc = if (ops >> (k - 1)) & 1 == 1 {
                            acc || bit
                        } else {
                            acc && bit
                        };
                    }
                    acc
                };
                let build = |v: usize| {
                    let mut words = Vec::new();
                    for k in 0..BOOL_OPERANDS {
                        if k > 0 {
                            words.push(if (ops >> (k - 1)) & 1 == 1 { "or" } else { "and" });
                        }
                        words.push(if (v >> k) & 1 == 1 { "true" } else { "false" });
                    }
                    words.push("is");
                    words.join(" ")
                };
                let flipped = values ^ (1 << rng.random_range(0..BOOL_OPERANDS));
                let answer = eval(values);
                let mis = if answer { "false" } else { "true" };
                (
                    build(values),
                    build(flipped),
                    answer.to_string(),
                    Some(mis.to_string()),
                    0,
                    None,
                )
            }
        };
        let bos = vocab.bos();
        let encode = |text: &str| -> Result<Vec<u32>> {
            let mut ids = vec![bos];
            ids.extend(vocab.encode(text)?);
            Ok(ids)
        };
        let clean_tokens = encode(&clean)?;
        let corrupted_tokens = encode(&corrupted)?;
        let pair = ExamplePair {
            answer_position: clean_tokens.len() - 1,
            clean_text: clean,
            corrupted_text: corrupted,
            clean_tokens,
            corrupted_tokens,
            answer_id: vocab.id(&answer)?,
            misleading_id: misleading.as_deref().map(|m| vocab.id(m)).transpose()?,
            answer,
            template_id,
            year,
        };
        pair.check()?;
        Ok(pair)
    }
}

/// A task's vocabulary and its three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub kind: TaskKind,
    pub spec: TaskSpec,
    pub vocab: Vocab,
    pub train: Vec<ExamplePair>,
    pub validation: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

impl TaskData {
    /// Draws disjoint splits from the product space of `spec`.
    pub fn generate(spec: TaskSpec, splits: Splits, seed: u64) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab();
        let total = spec.combo_count();
        if splits.total() > total {
            return Err(Error::Dataset(format!(
                "requested {} examples but the task only has {total} distinct combinations",
                splits.total()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = sample(&mut rng, total, splits.total()).into_vec();
        let mut examples = picks
            .iter()
            .map(|&i| spec.example(&vocab, i, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let test = examples.split_off(splits.train + splits.validation);
        let validation = examples.split_off(splits.train);
        Ok(Self {
            kind: spec.kind(),
            spec,
            vocab,
            train: examples,
            validation,
            test,
        })
    }

    /// Clean token sequences of the validation and test splits.
    pub fn held_out(&self) -> HashSet<Vec<u32>> {
        self.validation
            .iter()
            .chain(&self.test)
            .map(|p| p.clean_tokens.clone())
            .collect()
    }

    pub fn split(&self, name: &str) -> Result<&[ExamplePair]> {
        match name {
            "train" => Ok(&self.train),
            "validation" | "val" => Ok(&self.validation),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split `{name}`"))),
        }
    }

    /// Writes `vocab.json`, `task.json` and one JSON-lines file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("vocab.json"), self.vocab.to_json())?;
        std::fs::write(dir.join("task.json"), serde_json::to_string_pretty(&self.spec)?)?;
        for (name, pairs) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            write_jsonl(&dir.join(format!("{name}.jsonl")), pairs)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::from_json(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        let spec: TaskSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("task.json"))?)?;
        if spec.vocab() != vocab {
            return Err(Error::Dataset("vocab.json does not match task.json".into()));
        }
        Ok(Self {
            kind: spec.kind(),
            spec,
            vocab,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            validation: read_jsonl(&dir.join("validation.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
        })
    }
}

pub fn gen_ioi(splits: Splits, n_templates: usize, names: &[&str], seed: u64) -> Result<TaskData> {
    let spec = TaskSpec::Ioi {
        n_templates,
        names: names.iter().map(|s| s.to_string()).collect(),
    };
    TaskData::generate(spec, splits, seed)
}

pub fn gen_greater_than(splits: Splits, seed: u64) -> Result<TaskData> {
    TaskData::generate(TaskSpec::greater_than(), splits, seed)
}

pub fn gen_gendered_pronoun(splits: Splits, boys: &[&str], girls: &[&str], seed: u64) -> Result<TaskData> {
    let spec = TaskSpec::GenderedPronoun {
        boys: boys.iter().map(|s| s.to_string()).collect(),
        girls: girls.iter().map(|s| s.to_string()).collect(),
    };
    TaskData::generate(spec, splits, seed)
}

pub fn gen_boolean(splits: Splits, seed: u64) -> Result<TaskData> {
    TaskData::generate(TaskSpec::Boolean, splits, seed)
}

pub fn write_jsonl(path: &Path, pairs: &[ExamplePair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ExamplePair>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ExamplePair = serde_json::from_str(&line)?;
        p.check()?;
        out.push(p);
    }
    Ok(out)
}
