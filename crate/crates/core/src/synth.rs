//! Synthetic corpus generator.
//!
//! Every family owns a set of seed payload functions; malicious samples
//! carry noisy variants of some of them. Benign samples draw from a shared
//! pool of benign seeds. Both kinds embed verbatim copies of library
//! functions, relocated to the sample's image base so that only
//! canonicalization makes them byte-identical.

use chrono::{Duration, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{OptLevel, SampleFunction, SampleRecord};
use crate::ingest::{AddrRange, FunctionRecord, RawFunction};
use crate::kb::Label;

const FAMILY_NAMES: [&str; 8] = [
    "dridex", "emotet", "ramnit", "trickbot", "zeus", "qakbot", "lokibot", "formbook",
];
const REGISTERS: [&str; 8] = ["eax", "ebx", "ecx", "edx", "esi", "edi", "r8d", "r9d"];
const ALU: [&str; 10] = ["add", "sub", "xor", "and", "or", "imul", "cmp", "test", "shl", "ror"];
const LIBRARIES: [&str; 3] = ["libc", "zlib", "openssl"];
const IMAGE_SPAN: u64 = 0x10_0000;
const LIBRARY_BASE: u64 = 0x1000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub families: usize,
    pub per_family: usize,
    pub benign: usize,
    /// Per-line mutation probability for payload and benign variants.
    pub noise: f64,
    pub seed: u64,
    pub seeds_per_family: usize,
    pub payload_per_sample: usize,
    pub benign_pool: usize,
    pub benign_per_sample: usize,
    pub library_pool: usize,
    pub library_per_sample: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            families: 5,
            per_family: 40,
            benign: 200,
            noise: 0.1,
            seed: 42,
            seeds_per_family: 8,
            payload_per_sample: 5,
            benign_pool: 48,
            benign_per_sample: 6,
            library_pool: 24,
            library_per_sample: 3,
            start: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2024, 12, 31).expect("valid date"),
        }
    }
}

/// A line whose absolute-address operand depends on the image base.
#[derive(Debug, Clone)]
enum Line {
    Text(String),
    Absolute { prefix: String, offset: u64, suffix: String },
}

impl Line {
    fn render(&self, base: u64) -> String {
        match self {
            Line::Text(t) => t.clone(),
            Line::Absolute { prefix, offset, suffix } => format!("{prefix}0x{:08x}{suffix}", base + offset),
        }
    }
}

#[derive(Debug, Clone)]
struct SeedFunction {
    lines: Vec<Line>,
}

fn immediate(rng: &mut ChaCha8Rng) -> String {
    let v: u32 = rng.random_range(0x100..0xffff_ffff);
    if rng.random_bool(0.7) {
        format!("0x{v:x}")
    } else {
        v.to_string()
    }
}

fn random_line(rng: &mut ChaCha8Rng) -> Line {
    let r1 = *REGISTERS.choose(rng).expect("non-empty");
    let r2 = *REGISTERS.choose(rng).expect("non-empty");
    let alu = *ALU.choose(rng).expect("non-empty");
    match rng.random_range(0..10) {
        0..=3 => Line::Text(format!("{alu} {r1}, {}", immediate(rng))),
        4 => Line::Text(format!("{alu} {r1}, {r2}")),
        5 => Line::Text(format!("mov {r1}, [ebp-0x{:x}]", rng.random_range(1..0x40u32) * 4)),
        6 => Line::Text(format!("push {}", immediate(rng))),
        7 => Line::Absolute {
            prefix: format!("mov {r1}, ["),
            offset: rng.random_range(0x1000..IMAGE_SPAN - 0x1000),
            suffix: "]".into(),
        },
        8 => Line::Absolute {
            prefix: "call ".into(),
            offset: rng.random_range(0x1000..IMAGE_SPAN - 0x1000),
            suffix: String::new(),
        },
        _ => Line::Text(format!("lea {r1}, [{r2}+0x{:x}]", rng.random_range(0x10..0x1000u32))),
    }
}

fn seed_function(rng: &mut ChaCha8Rng) -> SeedFunction {
    let n = rng.random_range(20..=36);
    let mut lines = vec![Line::Text("push ebp".into()), Line::Text("mov ebp, esp".into())];
    lines.extend((0..n).map(|_| random_line(rng)));
    lines.push(Line::Text("pop ebp".into()));
    lines.push(Line::Text("ret".into()));
    SeedFunction { lines }
}

/// Applies one obfuscation-style edit: register swap, dead-code insertion
/// or a hex/decimal synonym for an immediate.
fn mutate(line: &str, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    match rng.random_range(0..3) {
        0 => {
            out.push("nop".into());
            out.push(line.to_string());
        }
        1 => {
            if let Some(reg) = REGISTERS.iter().find(|r| line.contains(*r)) {
                let other = *REGISTERS.choose(rng).expect("non-empty");
                out.push(line.replacen(reg, other, 1));
            } else {
                out.push("nop".into());
                out.push(line.to_string());
            }
        }
        _ => {
            let mut toks: Vec<String> = line.split(' ').map(String::from).collect();
            let last = toks.last_mut().expect("non-empty line");
            if let Some(h) = last.strip_prefix("0x").and_then(|h| u64::from_str_radix(h, 16).ok()) {
                *last = h.to_string();
            } else if let Ok(d) = last.parse::<u64>() {
                *last = format!("0x{d:x}");
            } else {
                out.push("nop".into());
            }
            out.push(toks.join(" "));
        }
    }
}

fn variant(seed: &SeedFunction, base: u64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(seed.lines.len() + 4);
    for l in &seed.lines {
        let text = l.render(base);
        if noise > 0.0 && rng.random_bool(noise.min(1.0)) {
            mutate(&text, rng, &mut out);
        } else {
            out.push(text);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub params: SynthParams,
    pub samples: Vec<SampleRecord>,
    /// Library reference functions rendered at [`library_range`].
    pub library: Vec<RawFunction>,
}

impl SynthCorpus {
    pub fn library_records(&self) -> Vec<FunctionRecord> {
        self.library.iter().map(FunctionRecord::from).collect()
    }
}

pub fn library_range() -> AddrRange {
    AddrRange::new(LIBRARY_BASE, LIBRARY_BASE + IMAGE_SPAN - 1).expect("valid range")
}

pub fn family_name(i: usize) -> String {
    FAMILY_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("family{i}"))
}

struct SampleBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    library: &'a [SeedFunction],
    params: &'a SynthParams,
}

impl SampleBuilder<'_> {
    fn build(
        &mut self,
        sample_id: String,
        label: Label,
        family: Option<String>,
        bodies: &[&SeedFunction],
    ) -> SampleRecord {
        let page = self.rng.random_range(0x40..0x400u64);
        let base = page * IMAGE_SPAN;
        let span_days = (self.params.end - self.params.start).num_days().max(0);
        let first_seen = self.params.start + Duration::days(self.rng.random_range(0..=span_days));

        let mut lines: Vec<Vec<String>> = bodies
            .iter()
            .map(|s| variant(s, base, self.params.noise, self.rng))
            .collect();
        for lib in self.library.choose_multiple(self.rng, self.params.library_per_sample) {
            lines.push(variant(lib, base, 0.0, self.rng));
        }
        lines.shuffle(self.rng);
        let functions = lines
            .into_iter()
            .enumerate()
            .map(|(i, body)| {
                let addr = base + 0x1000 + i as u64 * 0x400;
                SampleFunction {
                    name: format!("sub_{addr:x}"),
                    address: format!("0x{addr:x}"),
                    lines: body,
                }
            })
            .collect();
        SampleRecord {
            sample_id,
            label,
            family,
            first_seen: Some(first_seen),
            opt_level: Some(*OptLevel::ALL.choose(self.rng).expect("non-empty")),
            compiler: Some(if self.rng.random_bool(0.5) { "gcc" } else { "clang" }.into()),
            addr_range: AddrRange::new(base, base + IMAGE_SPAN - 1).expect("valid range"),
            functions,
        }
    }
}

/// Generates a corpus deterministically from `params.seed`.
pub fn generate(params: &SynthParams) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let family_seeds: Vec<Vec<SeedFunction>> = (0..params.families)
        .map(|_| (0..params.seeds_per_family).map(|_| seed_function(&mut rng)).collect())
        .collect();
    let benign_seeds: Vec<SeedFunction> = (0..params.benign_pool).map(|_| seed_function(&mut rng)).collect();
    let library_seeds: Vec<SeedFunction> = (0..params.library_pool).map(|_| seed_function(&mut rng)).collect();

    let library = library_seeds
        .iter()
        .enumerate()
        .map(|(i, s)| RawFunction {
            sample_id: format!("lib:{}", LIBRARIES[i % LIBRARIES.len()]),
            name: format!("{}_fn{i:02}", LIBRARIES[i % LIBRARIES.len()]),
            start_address: LIBRARY_BASE + 0x1000 + i as u64 * 0x400,
            lines: s.lines.iter().map(|l| l.render(LIBRARY_BASE)).collect(),
        })
        .collect();

    let mut samples = Vec::with_capacity(params.families * params.per_family + params.benign);
    let mut builder = SampleBuilder {
        rng: &mut rng,
        library: &library_seeds,
        params,
    };
    for (fi, seeds) in family_seeds.iter().enumerate() {
        let name = family_name(fi);
        for i in 0..params.per_family {
            let picks: Vec<&SeedFunction> = seeds
                .choose_multiple(builder.rng, params.payload_per_sample)
                .collect();
            samples.push(builder.build(
                format!("mal-{name}-{i:03}"),
                Label::Malicious,
                Some(name.clone()),
                &picks,
            ));
        }
    }
    for i in 0..params.benign {
        let picks: Vec<&SeedFunction> = benign_seeds
            .choose_multiple(builder.rng, params.benign_per_sample)
            .collect();
        samples.push(builder.build(format!("ben-{i:04}"), Label::Benign, None, &picks));
    }

    SynthCorpus {
        params: params.clone(),
        samples,
        library,
    }
}
