//! Synthetic lookup data, JSON-lines files and the token-overlap reference
//! retriever.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::PassageLookup;
use crate::tokenizer::{Tokenizer, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub query: String,
    pub answer: String,
    #[serde(default = "default_task")]
    pub task: String,
}

fn default_task() -> String {
    Task::Lookup.name().into()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// "Q: what is the secret code of ENTITY? A:"
    Lookup,
    /// "ENTITY [SEP] secret code", a format never seen in training.
    Shifted,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Lookup => "lookup",
            Task::Shifted => "shifted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(Task::Lookup),
            "shifted" => Ok(Task::Shifted),
            _ => Err(CoreError::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn query(self, entity: &str) -> String {
        match self {
            Task::Lookup => format!("Q: what is the secret code of {entity}? A:"),
            Task::Shifted => format!("{entity} [SEP] secret code"),
        }
    }
}

/// Which tasks appear in the train and eval files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMix {
    pub train: Vec<Task>,
    /// Each eval task gets `n_eval` examples.
    pub eval: Vec<Task>,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { train: vec![Task::Lookup], eval: vec![Task::Lookup, Task::Shifted] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthData {
    pub corpus: Vec<CorpusRecord>,
    pub train: Vec<QaRecord>,
    pub eval: Vec<QaRecord>,
    pub filler: Vec<TextRecord>,
    /// Vocabulary entries for [`Tokenizer::new`].
    pub vocab: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TEMPLATE_WORDS: &[&str] = &["q", ":", "?", "what", "is", "the", "secret", "code", "of", "a"];
const FILLER_WORDS: &[&str] = &[
    "the", "a", "river", "stone", "old", "city", "near", "green", "house", "light", "water", "small", "north",
    "road", "and", "with", "over", "under", "morning", "winter", "bright", "quiet", "field", "bridge", "was",
    "is", "by", "tall", "tree", "song", "wind", "farm", "market", "far", "from", "in", ".", ",",
];
const MAX_DRAWS: usize = 1_000_000;

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char;
    let v = VOWELS[rng.gen_range(0..VOWELS.len())] as char;
    format!("{c}{v}")
}

pub fn synth_data(seed: u64, n_passages: usize, n_train: usize, n_eval: usize, mix: &TaskMix) -> Result<SynthData> {
    if n_passages < 16 {
        return Err(CoreError::Config(format!("n_passages must be at least 16, got {n_passages}")));
    }
    if mix.train.is_empty() || mix.eval.is_empty() {
        return Err(CoreError::Config("task mix needs at least one train and one eval task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let reserved: HashSet<&str> = TEMPLATE_WORDS.iter().chain(FILLER_WORDS).copied().collect();
    let mut entities: Vec<String> = Vec::with_capacity(n_passages);
    let mut seen = HashSet::new();
    let mut draws = 0;
    while entities.len() < n_passages {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(CoreError::Config("token collision exhaustion while drawing entities".into()));
        }
        let e = format!("{}{}{}", syllable(&mut rng), syllable(&mut rng), CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        if !reserved.contains(e.as_str()) && seen.insert(e.clone()) {
            entities.push(e);
        }
    }

    // Codes are two syllables, e.g. "zo" + "##ki", never a vocabulary word
    // and never inside another passage's text.
    let mut codes: Vec<String> = Vec::with_capacity(n_passages);
    let mut used = HashSet::new();
    draws = 0;
    while codes.len() < n_passages {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(CoreError::Config("token collision exhaustion while drawing codes".into()));
        }
        let c = format!("{}{}", syllable(&mut rng), syllable(&mut rng));
        let clash = seen.contains(&c)
            || reserved.contains(c.as_str())
            || entities.iter().any(|e| e.contains(&c))
            || codes.iter().any(|o| o.contains(&c) || c.contains(o.as_str()));
        if !clash && used.insert(c.clone()) {
            codes.push(c);
        }
    }

    let corpus: Vec<CorpusRecord> = entities
        .iter()
        .zip(&codes)
        .enumerate()
        .map(|(i, (e, c))| CorpusRecord { id: format!("p{i:05}"), text: format!("the secret code of {e} is {c}") })
        .collect();
    for (i, c) in codes.iter().enumerate() {
        let holders = corpus.iter().filter(|r| r.text.contains(c.as_str())).count();
        if holders != 1 {
            return Err(CoreError::Config(format!("code {c} of passage {i} appears in {holders} passages")));
        }
    }

    // Entities split in proportion to the requested example counts.
    let mut order: Vec<usize> = (0..n_passages).collect();
    order.shuffle(&mut rng);
    let eval_share = n_eval as f64 / (n_train + n_eval).max(1) as f64;
    let n_eval_entities = ((n_passages as f64 * eval_share).round() as usize).clamp(1, n_passages - 1);
    let (eval_ents, train_ents) = order.split_at(n_eval_entities);

    let make = |ents: &[usize], tasks: &[Task], n: usize, rng: &mut ChaCha8Rng| -> Vec<QaRecord> {
        (0..n)
            .map(|i| {
                let e = ents[if i < ents.len() { i } else { rng.gen_range(0..ents.len()) }];
                let task = tasks[rng.gen_range(0..tasks.len())];
                QaRecord { query: task.query(&entities[e]), answer: codes[e].clone(), task: task.name().into() }
            })
            .collect()
    };
    let mut train = make(train_ents, &mix.train, n_train, &mut rng);
    train.shuffle(&mut rng);
    let mut eval = Vec::with_capacity(n_eval * mix.eval.len());
    let mut eval_order = eval_ents.to_vec();
    eval_order.shuffle(&mut rng);
    for &task in &mix.eval {
        eval.extend(make(&eval_order, &[task], n_eval, &mut rng));
    }

    let n_filler = (n_train / 4).max(8);
    let filler = (0..n_filler)
        .map(|_| {
            let len = rng.gen_range(6..14);
            let words: Vec<&str> = (0..len).map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]).collect();
            TextRecord { text: words.join(" ") }
        })
        .collect();

    let mut vocab: Vec<String> = TEMPLATE_WORDS.iter().chain(FILLER_WORDS).map(|s| s.to_string()).collect();
    vocab.extend(entities.iter().cloned());
    let syllables: BTreeSet<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    vocab.extend(syllables.iter().cloned());
    vocab.extend(syllables.iter().map(|s| format!("##{s}")));
    Ok(SynthData { corpus, train, eval, filler, vocab })
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const FILLER_FILE: &str = "filler.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

impl SynthData {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(&self.vocab)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(CORPUS_FILE), &self.corpus)?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(EVAL_FILE), &self.eval)?;
        write_jsonl(&dir.join(FILLER_FILE), &self.filler)?;
        fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&self.vocab).expect("strings serialize"))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = serde_json::from_str(&fs::read_to_string(&vocab_path)?)
            .map_err(|e| CoreError::Data { path: vocab_path.display().to_string(), msg: e.to_string() })?;
        Ok(Self {
            corpus: read_jsonl(&dir.join(CORPUS_FILE))?,
            train: read_jsonl(&dir.join(TRAIN_FILE))?,
            eval: read_jsonl(&dir.join(EVAL_FILE))?,
            filler: read_jsonl(&dir.join(FILLER_FILE))?,
            vocab,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let data_err = |msg: String| CoreError::Data { path: path.display().to_string(), msg };
    let file = fs::File::open(path).map_err(|e| data_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| data_err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Tokenized corpus; passage ids are row numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub tokens: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn new(records: Vec<CorpusRecord>, tok: &Tokenizer, max_len: usize) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut tokens = Vec::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(CoreError::Invalid(format!("duplicate corpus id {:?}", r.id)));
            }
            let t = tok.encode(&r.text);
            if t.is_empty() || t.len() > max_len {
                return Err(CoreError::Invalid(format!(
                    "passage {:?} has {} tokens, allowed 1..={max_len}",
                    r.id,
                    t.len()
                )));
            }
            tokens.push(t);
        }
        Ok(Self { records, tokens })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn text(&self, id: u64) -> Option<&str> {
        self.records.get(id as usize).map(|r| r.text.as_str())
    }

    pub fn passages(&self) -> Vec<&[u32]> {
        self.tokens.iter().map(Vec::as_slice).collect()
    }
}

impl PassageLookup for Corpus {
    fn passage_tokens(&self, id: u64) -> Option<&[u32]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }
}

/// Prompt (`[bos]` + query) and response (answer + `[eos]`) token ids.
pub fn encode_example(tok: &Tokenizer, qa: &QaRecord) -> (Vec<u32>, Vec<u32>) {
    let mut prompt = vec![BOS];
    prompt.extend(tok.encode(&qa.query));
    let mut response = tok.encode(&qa.answer);
    response.push(EOS);
    (prompt, response)
}

pub fn encode_prompt(tok: &Tokenizer, query: &str) -> Vec<u32> {
    let mut prompt = vec![BOS];
    prompt.extend(tok.encode(query));
    prompt
}

/// Shared lowercase word types over the square root of the length product.
pub struct OverlapRetriever {
    passages: Vec<(BTreeSet<String>, usize)>,
}

impl OverlapRetriever {
    pub fn new(corpus: &[CorpusRecord]) -> Self {
        Self {
            passages: corpus
                .iter()
                .map(|r| {
                    let words = Tokenizer::words(&r.text);
                    let n = words.len();
                    (words.into_iter().collect(), n)
                })
                .collect(),
        }
    }

    pub fn score(&self, query: &str) -> Vec<f64> {
        let words = Tokenizer::words(query);
        let qn = words.len();
        let q: BTreeSet<String> = words.into_iter().collect();
        self.passages
            .iter()
            .map(|(p, n)| {
                let shared = q.intersection(p).count() as f64;
                if qn == 0 || *n == 0 {
                    0.0
                } else {
                    shared / ((qn * n) as f64).sqrt()
                }
            })
            .collect()
    }

    /// Passage ids by descending score. Ties are ordered by a hash of the
    /// query and id, so tied passages do not favour low ids across queries.
    pub fn rank(&self, query: &str) -> Vec<u64> {
        let s = self.score(query);
        let salt = fnv1a(query.as_bytes(), FNV_OFFSET);
        let key = |id: u64| fnv1a(&id.to_le_bytes(), salt);
        let mut ids: Vec<u64> = (0..s.len() as u64).collect();
        ids.sort_by(|&a, &b| s[b as usize].total_cmp(&s[a as usize]).then(key(a).cmp(&key(b))).then(a.cmp(&b)));
        ids
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    bytes.iter().fold(seed, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
