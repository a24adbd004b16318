//! Deterministic template corpus spanning all eight domain groups.
//!
//! The generated text is small, regular and learnable by a character-level
//! model, which is all the toy training runs need. The bundled copy under
//! `data/` is the output of [`toy_corpus`] with seed 0.

use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{read_jsonl, Document, DomainGroup};
use crate::error::Result;

pub const BUNDLED_SEED: u64 = 0;
const BUNDLED: &str = include_str!("../../data/toy_corpus.jsonl");

/// The corpus shipped with the crate.
pub fn bundled_corpus() -> Result<Vec<Document>> {
    read_jsonl(BUNDLED.as_bytes())
}

/// Approximate UTF-8 bytes generated per group.
const BUDGET: [(DomainGroup, usize); 8] = [
    (DomainGroup::GeneralWeb, 48_000),
    (DomainGroup::Multilingual, 14_000),
    (DomainGroup::Korean, 20_000),
    (DomainGroup::Academic, 14_000),
    (DomainGroup::Specialized, 12_000),
    (DomainGroup::Code, 18_000),
    (DomainGroup::Math, 14_000),
    (DomainGroup::Reasoning, 12_000),
];

pub fn toy_corpus(seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    for (group, budget) in BUDGET {
        let mut used = 0;
        let mut k = 0;
        while used < budget {
            let n = rng.random_range(3..9);
            let text: Vec<String> = (0..n).map(|_| sentence(group, &mut rng)).collect();
            let sep = if group == DomainGroup::Code { "\n" } else { " " };
            let text = text.join(sep);
            used += text.len();
            docs.push(Document::new(format!("{group}-{k:04}"), text, group));
            k += 1;
        }
    }
    docs
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn sentence<R: Rng>(group: DomainGroup, rng: &mut R) -> String {
    match group {
        DomainGroup::GeneralWeb => general(rng),
        DomainGroup::Multilingual => multilingual(rng),
        DomainGroup::Korean => korean(rng),
        DomainGroup::Academic => academic(rng),
        DomainGroup::Specialized => specialized(rng),
        DomainGroup::Code => code(rng),
        DomainGroup::Math => math(rng),
        DomainGroup::Reasoning => reasoning(rng),
    }
}

const ADJ: &[&str] = &[
    "quiet", "bright", "old", "small", "busy", "green", "cold", "warm", "tall", "clever", "slow", "happy",
];
const NOUN: &[&str] = &[
    "dog", "river", "teacher", "garden", "city", "market", "child", "bird", "train", "village", "artist", "farmer",
];
const VERB: &[&str] = &[
    "visits",
    "watches",
    "follows",
    "paints",
    "finds",
    "helps",
    "remembers",
    "crosses",
    "builds",
    "greets",
];
const PLACE: &[&str] = &[
    "bridge", "station", "library", "harbor", "school", "forest", "square", "hill",
];
const TIME: &[&str] = &[
    "every morning",
    "at night",
    "on sunday",
    "in winter",
    "after lunch",
    "before dawn",
];

fn general<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => format!(
            "The {} {} {} the {} near the {}.",
            pick(rng, ADJ),
            pick(rng, NOUN),
            pick(rng, VERB),
            pick(rng, NOUN),
            pick(rng, PLACE)
        ),
        1 => format!(
            "{} the {} {} a {} {}.",
            capitalise(pick(rng, TIME)),
            pick(rng, NOUN),
            pick(rng, VERB),
            pick(rng, ADJ),
            pick(rng, NOUN)
        ),
        _ => format!(
            "A {} {} lives by the {}, and it is very {}.",
            pick(rng, ADJ),
            pick(rng, NOUN),
            pick(rng, PLACE),
            pick(rng, ADJ)
        ),
    }
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn multilingual<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..3) {
        0 => format!(
            "El {} {} la {} cerca del {}.",
            pick(rng, &["perro", "maestro", "niño", "pájaro", "tren"]),
            pick(rng, &["visita", "mira", "sigue", "encuentra"]),
            pick(rng, &["casa", "plaza", "escuela", "montaña"]),
            pick(rng, &["río", "puente", "mercado"])
        ),
        1 => format!(
            "Le {} {} la {} près du {}.",
            pick(rng, &["chien", "professeur", "garçon", "train"]),
            pick(rng, &["regarde", "suit", "trouve", "aide"]),
            pick(rng, &["maison", "gare", "ville", "forêt"]),
            pick(rng, &["pont", "marché", "port"])
        ),
        _ => format!(
            "Der {} {} die {} am {}.",
            pick(rng, &["Hund", "Lehrer", "Vogel", "Zug"]),
            pick(rng, &["sieht", "findet", "besucht", "malt"]),
            pick(rng, &["Stadt", "Schule", "Brücke", "Straße"]),
            pick(rng, &["Morgen", "Abend", "Fluss"])
        ),
    }
}

fn korean<R: Rng>(rng: &mut R) -> String {
    let subj = ["학생", "선생님", "아이", "친구", "할머니", "의사", "고양이"];
    let place = ["학교", "시장", "공원", "도서관", "바다", "집", "병원"];
    let obj = ["책", "사과", "편지", "그림", "음악", "밥", "꽃"];
    let verb = [
        "읽었습니다",
        "샀습니다",
        "보았습니다",
        "만들었습니다",
        "좋아합니다",
        "기다립니다",
    ];
    let topic = |w: &str| {
        let last = w.chars().last().expect("non-empty word");
        let has_final = !(last as u32).wrapping_sub(0xAC00).is_multiple_of(28);
        format!("{w}{}", if has_final { "은" } else { "는" })
    };
    let object = |w: &str| {
        let last = w.chars().last().expect("non-empty word");
        let has_final = !(last as u32).wrapping_sub(0xAC00).is_multiple_of(28);
        format!("{w}{}", if has_final { "을" } else { "를" })
    };
    match rng.random_range(0..2) {
        0 => format!(
            "{} {}에서 {} {}.",
            topic(pick(rng, &subj)),
            pick(rng, &place),
            object(pick(rng, &obj)),
            pick(rng, &verb)
        ),
        _ => format!(
            "오늘 {} {} {}.",
            topic(pick(rng, &subj)),
            object(pick(rng, &obj)),
            pick(rng, &verb)
        ),
    }
}

fn academic<R: Rng>(rng: &mut R) -> String {
    let field = ["ecology", "linguistics", "optics", "economics", "genetics", "geology"];
    let concept = [
        "variance",
        "structure",
        "stability",
        "growth",
        "distribution",
        "symmetry",
    ];
    let method = [
        "a survey",
        "a controlled experiment",
        "a simulation",
        "field measurements",
    ];
    format!(
        "In {}, we study the {} of {} samples using {}; the results suggest a {} effect.",
        pick(rng, &field),
        pick(rng, &concept),
        rng.random_range(10..500),
        pick(rng, &method),
        pick(rng, &["strong", "weak", "moderate", "negligible"])
    )
}

fn specialized<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..2) {
        0 => format!(
            "Patient presents with {} and {}; recommended dose is {} mg twice daily.",
            pick(rng, &["fever", "cough", "fatigue", "headache", "nausea"]),
            pick(rng, &["mild pain", "dizziness", "a rash", "chills"]),
            rng.random_range(1..20) * 50
        ),
        _ => format!(
            "Section {}.{}: the {} shall notify the {} within {} days.",
            rng.random_range(1..12),
            rng.random_range(1..9),
            pick(rng, &["tenant", "seller", "contractor", "licensee"]),
            pick(rng, &["landlord", "buyer", "owner", "authority"]),
            rng.random_range(5..60)
        ),
    }
}

fn code<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, &["total", "count", "score", "width", "index", "limit"]);
    let k = rng.random_range(2..10);
    match rng.random_range(0..3) {
        0 => format!("fn scale_{name}(x: i32) -> i32 {{\n    x * {k}\n}}"),
        1 => format!("def add_{name}(a, b):\n    return a + b + {k}"),
        _ => format!("for i in range({k}):\n    {name} += i"),
    }
}

fn math<R: Rng>(rng: &mut R) -> String {
    let a = rng.random_range(1..100);
    let b = rng.random_range(1..100);
    match rng.random_range(0..3) {
        0 => format!("{a} + {b} = {}.", a + b),
        1 => format!("{a} * {} = {}.", b % 12, a * (b % 12)),
        _ => format!("If x = {a}, then 2x + {b} = {}.", 2 * a + b),
    }
}

fn reasoning<R: Rng>(rng: &mut R) -> String {
    let kinds = ["cats", "birds", "robots", "painters", "sailors", "farmers"];
    let traits = ["curious", "careful", "patient", "honest", "strong"];
    let name = pick(rng, &["Mina", "Jun", "Alex", "Sora", "Leo", "Hana"]);
    let k = pick(rng, &kinds);
    let t = pick(rng, &traits);
    format!("All {k} are {t}. {name} is one of the {k}. Therefore {name} is {t}.")
}
