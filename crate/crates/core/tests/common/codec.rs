//! Enumerated report grammar with a hand-built expected vector table.

use c2fvl::report_codec::{compile_report, decode_vector, encode_vector, parse_report, TextVector};
use c2fvl::Error;

pub const EXEMPLAR: &str =
    "Bilateral pulmonary infection, two infected areas, upper middle left lung and middle lower right lung";

pub const WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
pub const ZONES: [&str; 3] = ["upper", "middle", "lower"];

/// Report text for zone bits (bit i: left zone i, bit 3 + i: right zone i).
pub fn render(prefix: &str, count: u32, bits: u8, digits: bool) -> String {
    let count_word = if digits { count.to_string() } else { WORDS[count as usize - 1].to_string() };
    let noun = if count == 1 { "area" } else { "areas" };
    let mut lungs = Vec::new();
    for (side, shift) in [("left", 0), ("right", 3)] {
        let zs: Vec<&str> = (0..3).filter(|i| bits >> (shift + i) & 1 == 1).map(|i| ZONES[i]).collect();
        if !zs.is_empty() {
            lungs.push(format!("{} {side} lung", zs.join(" ")));
        }
    }
    let head = if prefix.is_empty() { "pulmonary infection".to_string() } else { format!("{prefix} pulmonary infection") };
    format!("{head}, {count_word} infected {noun}, {}", lungs.join(" and "))
}

/// Hand-built expectation: `Some(vector)` or `None` for an inconsistent report.
pub fn oracle(prefix: &str, count: u32, bits: u8) -> Option<[u32; 8]> {
    let left = bits & 0b111 != 0;
    let right = bits & 0b111000 != 0;
    let bilateral = left && right;
    let says_bilateral = prefix == "Bilateral";
    if says_bilateral != bilateral {
        return None;
    }
    let mut v = [0; 8];
    v[0] = u32::from(bilateral);
    v[1] = count;
    for i in 0..6 {
        v[2 + i] = u32::from(bits >> i & 1 == 1);
    }
    Some(v)
}

/// Every zone subset x count 1..9 x laterality prefix x count style; returns
/// the number of reports checked and the mismatches.
pub fn enumerated_table() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for bits in 1u8..64 {
        for count in 1..=9 {
            for prefix in ["Bilateral", "Unilateral", ""] {
                for digits in [false, true] {
                    let text = render(prefix, count, bits, digits);
                    match (oracle(prefix, count, bits), compile_report(&text)) {
                        (Some(want), Ok(got)) if got.values() == want => {}
                        (None, Err(Error::InconsistentReport(_))) => {}
                        (want, got) => bad.push(format!("{text}: expected {want:?}, got {got:?}")),
                    }
                    checked += 1;
                }
            }
        }
    }
    (checked, bad)
}

/// decode -> parse -> encode over every zone subset x count 1..9.
pub fn round_trip() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for bits in 1u8..64 {
        for count in 1..=9 {
            let bilateral = bits & 0b111 != 0 && bits & 0b111000 != 0;
            let mut v = [0u32; 8];
            v[0] = u32::from(bilateral);
            v[1] = count;
            for i in 0..6 {
                v[2 + i] = u32::from(bits >> i & 1 == 1);
            }
            let tv = TextVector::new(v).unwrap();
            let text = decode_vector(&tv).unwrap();
            match parse_report(&text) {
                Ok(ast) if encode_vector(&ast) == tv => {}
                other => bad.push(format!("{text}: {other:?}")),
            }
            checked += 1;
        }
    }
    (checked, bad)
}
