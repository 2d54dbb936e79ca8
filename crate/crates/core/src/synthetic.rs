//! A small artificial language with determiner-noun and subject-verb number
//! agreement, plus a matching minimal-pair generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::Result;
use crate::eval::MinimalPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Num {
    Sg,
    Pl,
}

impl Num {
    fn flip(self) -> Self {
        match self {
            Num::Sg => Num::Pl,
            Num::Pl => Num::Sg,
        }
    }

    fn pick(rng: &mut ChaCha8Rng) -> Self {
        if rng.gen_bool(0.5) {
            Num::Sg
        } else {
            Num::Pl
        }
    }
}

const NOUNS: [(&str, &str); 16] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("teacher", "teachers"),
    ("farmer", "farmers"),
    ("horse", "horses"),
    ("baby", "babies"),
    ("friend", "friends"),
    ("doctor", "doctors"),
    ("duck", "ducks"),
    ("pig", "pigs"),
    ("cow", "cows"),
    ("king", "kings"),
    ("lady", "ladies"),
];
/// Number-marked determiners, paired by position.
const DETS: [(&str, &str); 3] = [("this", "these"), ("that", "those"), ("a", "some")];
const INTRANSITIVE: [(&str, &str); 8] = [
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("sings", "sing"),
    ("jumps", "jump"),
    ("laughs", "laugh"),
    ("smiles", "smile"),
    ("waits", "wait"),
    ("swims", "swim"),
];
const TRANSITIVE: [(&str, &str); 6] = [
    ("sees", "see"),
    ("likes", "like"),
    ("helps", "help"),
    ("finds", "find"),
    ("follows", "follow"),
    ("chases", "chase"),
];
const ADJECTIVES: [&str; 6] = ["big", "small", "happy", "old", "red", "little"];
const PREPOSITIONS: [&str; 4] = ["near", "behind", "with", "beside"];

fn form(pair: (&'static str, &'static str), n: Num) -> &'static str {
    match n {
        Num::Sg => pair.0,
        Num::Pl => pair.1,
    }
}

#[derive(Debug, Clone)]
struct Np {
    num: Num,
    /// Index into `DETS`, or `None` for "the".
    det: Option<usize>,
    adj: Option<&'static str>,
    noun: usize,
}

impl Np {
    fn sample(rng: &mut ChaCha8Rng, num: Num, marked: bool) -> Self {
        let det = if marked || rng.gen_bool(0.6) {
            Some(rng.gen_range(0..DETS.len()))
        } else {
            None
        };
        Self {
            num,
            det,
            adj: rng.gen_bool(0.3).then(|| *ADJECTIVES.choose(rng).unwrap()),
            noun: rng.gen_range(0..NOUNS.len()),
        }
    }

    fn any(rng: &mut ChaCha8Rng) -> Self {
        let num = Num::pick(rng);
        Self::sample(rng, num, false)
    }

    fn words(&self, det_num: Num) -> Vec<&'static str> {
        let mut w = vec![self.det.map_or("the", |d| form(DETS[d], det_num))];
        w.extend(self.adj);
        w.push(form(NOUNS[self.noun], self.num));
        w
    }
}

#[derive(Debug, Clone)]
struct Clause {
    subject: Np,
    pp: Option<(&'static str, Np)>,
    verb: (&'static str, &'static str),
    object: Option<Np>,
}

impl Clause {
    fn sample(rng: &mut ChaCha8Rng, pp_prob: f64, marked_subject: bool) -> Self {
        let num = Num::pick(rng);
        let subject = Np::sample(rng, num, marked_subject);
        let pp = rng
            .gen_bool(pp_prob)
            .then(|| (*PREPOSITIONS.choose(rng).unwrap(), Np::any(rng)));
        let (verb, object) = if rng.gen_bool(0.5) {
            (*TRANSITIVE.choose(rng).unwrap(), Some(Np::any(rng)))
        } else {
            (*INTRANSITIVE.choose(rng).unwrap(), None)
        };
        Self {
            subject,
            pp,
            verb,
            object,
        }
    }

    fn render(&self, det_num: Num, verb_num: Num) -> String {
        let mut w = self.subject.words(det_num);
        if let Some((p, np)) = &self.pp {
            w.push(p);
            w.extend(np.words(np.num));
        }
        w.push(form(self.verb, verb_num));
        if let Some(o) = &self.object {
            w.extend(o.words(o.num));
        }
        w.push(".");
        w.join(" ")
    }

    fn grammatical(&self) -> String {
        self.render(self.subject.num, self.subject.num)
    }
}

/// Grammatical sentences totalling at least `n_tokens` whitespace tokens.
pub fn generate_sentences(n_tokens: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut total = 0;
    while total < n_tokens {
        let s = Clause::sample(&mut rng, 0.3, false).grammatical();
        total += s.split_whitespace().count();
        out.push(s);
    }
    out
}

pub fn generate_corpus(n_tokens: usize, seed: u64) -> Result<Corpus> {
    let lines = generate_sentences(n_tokens, seed);
    Corpus::from_lines("synthetic", lines.iter().map(String::as_str), true, 3)
}

/// `n` minimal pairs, alternating D-N AGR and S-V AGR. Half the S-V pairs put
/// an opposite-number noun inside a prepositional phrase between subject and
/// verb.
pub fn generate_pairs(n: usize, seed: u64) -> Vec<MinimalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pair = if i % 2 == 0 {
            let c = Clause::sample(&mut rng, 0.0, true);
            let n = c.subject.num;
            MinimalPair {
                category: "D-N AGR".into(),
                subcategory: if c.subject.adj.is_some() { "with_adjective" } else { "simple" }.into(),
                good: c.render(n, n),
                bad: c.render(n.flip(), n),
            }
        } else {
            let across = (i / 2) % 2 == 1;
            let mut c = Clause::sample(&mut rng, if across { 1.0 } else { 0.0 }, false);
            if let Some((_, np)) = c.pp.as_mut() {
                np.num = c.subject.num.flip();
            }
            let n = c.subject.num;
            MinimalPair {
                category: "S-V AGR".into(),
                subcategory: if across { "across_pp" } else { "simple" }.into(),
                good: c.render(n, n),
                bad: c.render(n, n.flip()),
            }
        };
        out.push(pair);
    }
    out
}
