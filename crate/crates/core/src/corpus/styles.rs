use rand::{Rng, RngCore};

use super::InstructionExample;

/// A template grammar for one client's register.
#[derive(Debug, Clone, Copy)]
pub struct StyleSpec {
    pub name: &'static str,
    /// Inclusive byte-length bounds of `instruction_input`.
    pub input_len: (usize, usize),
    /// Inclusive byte-length bounds of `instruction_output`.
    pub output_len: (usize, usize),
    generate: fn(&mut dyn RngCore) -> (String, String),
}

impl StyleSpec {
    /// Draws one example, re-drawing until both fields are in bounds.
    pub fn sample(&self, rng: &mut dyn RngCore) -> InstructionExample {
        loop {
            let (x, y) = (self.generate)(rng);
            let ok = |s: &str, (lo, hi): (usize, usize)| (lo..=hi).contains(&s.len());
            if ok(&x, self.input_len) && ok(&y, self.output_len) {
                return InstructionExample::new(x, y);
            }
        }
    }

    /// Upper bound on the tokenized length: BOS + input + output + EOS.
    pub fn max_tokens(&self) -> usize {
        self.input_len.1 + self.output_len.1 + 2
    }
}

fn pick<'a>(rng: &mut dyn RngCore, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

const SURNAMES: &[&str] = &["Zhang", "Wang", "Li", "Zhao", "Chen", "Liu", "Yang", "Huang", "Zhou", "Wu"];
const MONTHS: &[&str] = &["March", "April", "May", "June", "July", "August", "October", "December"];
const PLACES: &[&str] = &["the station", "a market", "the harbour", "a warehouse", "the plaza", "a hotel"];
// (act, objects, offence, base months)
const OFFENCES: &[(&str, &[&str], &str, u32)] = &[
    ("stole", &["a bicycle", "a phone", "cash", "a laptop"], "Theft", 6),
    ("robbed", &["a clerk", "a driver", "a vendor"], "Robbery", 36),
    ("defrauded", &["a buyer", "an investor", "a lender"], "Fraud", 12),
    ("assaulted", &["a guard", "a neighbour", "a waiter"], "Assault", 9),
    ("damaged", &["a vehicle", "a shopfront", "a kiosk"], "Criminal Damage", 4),
];

fn court(rng: &mut dyn RngCore) -> (String, String) {
    let name = pick(rng, SURNAMES);
    let &(act, objects, offence, months) = &OFFENCES[rng.random_range(0..OFFENCES.len())];
    let object = pick(rng, objects);
    let place = pick(rng, PLACES);
    let month = pick(rng, MONTHS);
    let prior = rng.random_range(0..3u32);
    let x = format!("Facts: {name} {act} {object} at {place} in {month}. Priors: {prior}.");
    let y = format!("Held: {offence}. {name} serves {} months.", months * (prior + 1));
    (x, y)
}

const PROBLEMS: &[(&str, &str)] = &[
    ("boss wont pay me", "keep ur payslips n ask labour office"),
    ("landlord kept deposit", "send him a text n keep the receipt"),
    ("got fired today", "ask for the letter n dont sign stuff"),
    ("neighbour dog bit me", "get the doc note n snap some pics"),
    ("ex took my car", "grab the car papers n call the cops"),
    ("shop wont refund", "keep the bill n go to consumer desk"),
    ("debt guy keeps calling", "write down calls n block the number"),
];
const OPENERS: &[&str] = &["", "help ", "pls ", "ugh "];
const TAILS: &[&str] = &["??", "?", " wat do", " help"];
const CLOSERS: &[&str] = &["ok", "lol", "np", "gl"];

fn consult(rng: &mut dyn RngCore) -> (String, String) {
    let &(problem, advice) = &PROBLEMS[rng.random_range(0..PROBLEMS.len())];
    let x = format!("{}{problem}{}", pick(rng, OPENERS), pick(rng, TAILS));
    let y = format!("{advice} {}", pick(rng, CLOSERS));
    (x, y)
}

const ACTORS: &[&str] = &["a minor", "an adult", "a tenant", "a driver", "a seller"];
// (action, steps)
const ACTIONS: &[(&str, &str)] = &[
    ("sign a lease", "1) age 18+ 2) consent"),
    ("sell a car", "1) owns it 2) title ok"),
    ("make a will", "1) age 18+ 2) sane"),
    ("sue a firm", "1) has claim 2) in time"),
];

fn reasoning(rng: &mut dyn RngCore) -> (String, String) {
    let actor = pick(rng, ACTORS);
    let &(action, steps) = &ACTIONS[rng.random_range(0..ACTIONS.len())];
    let x = format!("Q: can {actor} {action}?");
    let minor = actor == "a minor";
    let verdict = if minor && steps.contains("18+") { "no" } else { "yes" };
    let step3 = if minor { "3) minor" } else { "3) met" };
    let y = format!("{steps} {step3} => {verdict}");
    (x, y)
}

/// Court-view register, colloquial consultation, step-marked reasoning.
pub const STYLES: [StyleSpec; 3] = [
    StyleSpec {
        name: "court",
        input_len: (50, 75),
        output_len: (30, 48),
        generate: court,
    },
    StyleSpec {
        name: "consult",
        input_len: (10, 30),
        output_len: (25, 42),
        generate: consult,
    },
    StyleSpec {
        name: "reasoning",
        input_len: (18, 32),
        output_len: (22, 36),
        generate: reasoning,
    },
];
