//! Structured lesion reports and their 8-dimensional vector encoding.
//!
//! Vector layout: `[bilateral, count, left upper, left middle, left lower,
//! right upper, right middle, right lower]`. The accepted report grammar is
//! the one the canonical decoder emits, loosened to be case-insensitive,
//! order-insensitive within a lung, and tolerant of digits for counts:
//!
//! ```text
//! report  := "no pulmonary infection"
//!          | [ "bilateral" | "unilateral" ] "pulmonary infection" clause*
//! clause  := count ( "infected" )? ( "area" | "areas" )
//!          | zone+ ( "left" | "right" ) "lung"
//! count   := digits | "one" .. "nine"
//! zone    := "upper" | "middle" | "lower"
//! ```
//!
//! Clauses are separated by commas, semicolons or "and".

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Upper,
    Middle,
    Lower,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::Upper, Zone::Middle, Zone::Lower];

    pub fn word(self) -> &'static str {
        match self {
            Zone::Upper => "upper",
            Zone::Middle => "middle",
            Zone::Lower => "lower",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 2] = [Side::Left, Side::Right];

    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Subset of {upper, middle, lower}.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ZoneSet(u8);

impl ZoneSet {
    pub const EMPTY: ZoneSet = ZoneSet(0);

    pub fn from_zones(zones: impl IntoIterator<Item = Zone>) -> Self {
        let mut s = Self::EMPTY;
        for z in zones {
            s.insert(z);
        }
        s
    }

    /// Bits 0..3 are upper, middle, lower.
    pub fn from_bits(bits: u8) -> Self {
        ZoneSet(bits & 0b111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, z: Zone) {
        self.0 |= z.bit();
    }

    pub fn contains(self, z: Zone) -> bool {
        self.0 & z.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Zones in upper, middle, lower order.
    pub fn iter(self) -> impl Iterator<Item = Zone> {
        Zone::ALL.into_iter().filter(move |z| self.contains(*z))
    }
}

impl fmt::Debug for ZoneSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Parsed report. Construct through [`ReportAst::new`] to enforce the
/// laterality and count invariants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReportAst {
    bilateral: bool,
    lesion_count: u32,
    left: ZoneSet,
    right: ZoneSet,
}

impl ReportAst {
    pub fn new(bilateral: bool, lesion_count: u32, left: ZoneSet, right: ZoneSet) -> Result<Self> {
        let both = !left.is_empty() && !right.is_empty();
        if bilateral != both {
            return Err(Error::InconsistentReport(if bilateral {
                "bilateral infection needs zones in both lungs".into()
            } else {
                "zones in both lungs require a bilateral infection".into()
            }));
        }
        let any = !left.is_empty() || !right.is_empty();
        if (lesion_count == 0) == any {
            return Err(Error::InconsistentReport(format!(
                "lesion count {lesion_count} disagrees with {} listed zone(s)",
                left.len() + right.len()
            )));
        }
        Ok(Self {
            bilateral,
            lesion_count,
            left,
            right,
        })
    }

    /// The "no infection" report.
    pub fn empty() -> Self {
        Self {
            bilateral: false,
            lesion_count: 0,
            left: ZoneSet::EMPTY,
            right: ZoneSet::EMPTY,
        }
    }

    pub fn bilateral(&self) -> bool {
        self.bilateral
    }

    pub fn lesion_count(&self) -> u32 {
        self.lesion_count
    }

    pub fn zones(&self, side: Side) -> ZoneSet {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

/// The 8-dimensional lesion descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<u32>")]
pub struct TextVector([u32; 8]);

impl TextVector {
    pub const DIM: usize = 8;

    pub fn new(v: [u32; 8]) -> Result<Self> {
        if v[0] > 1 {
            return Err(Error::InvalidVector(format!("bilateral flag must be 0 or 1, got {}", v[0])));
        }
        if let Some(i) = (2..8).find(|&i| v[i] > 1) {
            return Err(Error::InvalidVector(format!("zone indicator v[{i}] must be 0 or 1, got {}", v[i])));
        }
        if v[0] == 1 && (v[2..5].iter().sum::<u32>() == 0 || v[5..8].iter().sum::<u32>() == 0) {
            return Err(Error::InvalidVector("bilateral flag set without zones in both lungs".into()));
        }
        Ok(Self(v))
    }

    pub fn zero() -> Self {
        Self([0; 8])
    }

    pub fn ones() -> Self {
        Self([1; 8])
    }

    pub fn values(&self) -> [u32; 8] {
        self.0
    }

    pub fn as_f64(&self) -> [f64; 8] {
        self.0.map(f64::from)
    }

    /// Validating conversion from real-valued input (e.g. JSON).
    pub fn from_reals(v: &[f64]) -> Result<Self> {
        if v.len() != Self::DIM {
            return Err(Error::InvalidVector(format!("expected 8 entries, got {}", v.len())));
        }
        let mut out = [0u32; 8];
        for (o, &x) in out.iter_mut().zip(v) {
            if !(x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64) {
                return Err(Error::InvalidVector(format!("entry {x} is not a non-negative integer")));
            }
            *o = x as u32;
        }
        Self::new(out)
    }

    pub fn zones(&self, side: Side) -> ZoneSet {
        let off = match side {
            Side::Left => 2,
            Side::Right => 5,
        };
        ZoneSet::from_zones(Zone::ALL.into_iter().filter(|&z| self.0[off + z as usize] == 1))
    }
}

impl TryFrom<Vec<f64>> for TextVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_reals(&v)
    }
}

impl From<TextVector> for Vec<u32> {
    fn from(v: TextVector) -> Self {
        v.0.to_vec()
    }
}

/// JSON array form, e.g. `[1,2,1,1,0,0,1,1]`.
impl fmt::Display for TextVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

const NUMBER_WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Word(String),
    Sep,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<Token>| {
        if !word.is_empty() {
            let w = std::mem::take(word);
            out.push(if w == "and" { Token::Sep } else { Token::Word(w) });
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if matches!(ch, ',' | ';' | '.') {
            flush(&mut word, &mut out);
            out.push(Token::Sep);
        } else {
            return Err(Error::UnparseableReport(format!("unexpected character {ch:?}")));
        }
    }
    flush(&mut word, &mut out);
    Ok(out)
}

fn parse_count(word: &str) -> Option<u32> {
    if word.bytes().all(|b| b.is_ascii_digit()) {
        return word.parse().ok();
    }
    NUMBER_WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u32 + 1)
}

fn parse_zone(word: &str) -> Option<Zone> {
    Zone::ALL.into_iter().find(|z| z.word() == word)
}

fn parse_side(word: &str) -> Option<Side> {
    Side::ALL.into_iter().find(|s| s.word() == word)
}

/// Parse a free-text finding into a [`ReportAst`].
pub fn parse_report(text: &str) -> Result<ReportAst> {
    let tokens = tokenize(text)?;
    // Split into clauses of words, dropping empty ones.
    let mut clauses: Vec<Vec<&str>> = vec![Vec::new()];
    for t in &tokens {
        match t {
            Token::Word(w) => clauses.last_mut().unwrap().push(w.as_str()),
            Token::Sep => clauses.push(Vec::new()),
        }
    }
    clauses.retain(|c| !c.is_empty());
    let Some((head, rest)) = clauses.split_first() else {
        return Err(Error::UnparseableReport("empty report".into()));
    };

    if head[..] == ["no", "pulmonary", "infection"] {
        if let Some(extra) = rest.first() {
            return Err(Error::UnparseableReport(format!(
                "unexpected text after a negative finding: {:?}",
                extra.join(" ")
            )));
        }
        return Ok(ReportAst::empty());
    }

    let (laterality, head_rest) = match head.first().copied() {
        Some("bilateral") => (Some(true), &head[1..]),
        Some("unilateral") => (Some(false), &head[1..]),
        _ => (None, &head[..]),
    };
    if head_rest.len() < 2 || head_rest[..2] != ["pulmonary", "infection"] {
        return Err(Error::UnparseableReport(format!(
            "expected \"pulmonary infection\", found {:?}",
            head.join(" ")
        )));
    }

    let mut count: Option<u32> = None;
    let mut left = ZoneSet::EMPTY;
    let mut right = ZoneSet::EMPTY;
    let mut pending: Vec<&[&str]> = Vec::new();
    if head_rest.len() > 2 {
        pending.push(&head_rest[2..]);
    }
    pending.extend(rest.iter().map(Vec::as_slice));

    for clause in pending {
        if let Some(n) = parse_count(clause[0]) {
            let tail = &clause[1..];
            let ok = matches!(tail, ["infected", "area" | "areas"] | ["area" | "areas"]);
            if !ok {
                return Err(Error::UnparseableReport(format!(
                    "malformed count clause {:?}",
                    clause.join(" ")
                )));
            }
            if count.replace(n).is_some() {
                return Err(Error::UnparseableReport("lesion count given twice".into()));
            }
            continue;
        }
        let zone_words = clause.iter().take_while(|w| parse_zone(w).is_some()).count();
        let tail = &clause[zone_words..];
        let side = match tail {
            [s, "lung"] => parse_side(s),
            _ => None,
        };
        match side {
            Some(side) if zone_words > 0 => {
                let set = match side {
                    Side::Left => &mut left,
                    Side::Right => &mut right,
                };
                for w in &clause[..zone_words] {
                    set.insert(parse_zone(w).unwrap());
                }
            }
            _ => {
                return Err(Error::UnparseableReport(format!(
                    "unrecognised clause {:?}",
                    clause.join(" ")
                )))
            }
        }
    }

    let Some(count) = count else {
        return Err(Error::UnparseableReport("missing lesion count".into()));
    };
    ReportAst::new(laterality.unwrap_or(false), count, left, right)
}

pub fn encode_vector(ast: &ReportAst) -> TextVector {
    let mut v = [0u32; 8];
    v[0] = u32::from(ast.bilateral);
    v[1] = ast.lesion_count;
    for z in ast.left.iter() {
        v[2 + z as usize] = 1;
    }
    for z in ast.right.iter() {
        v[5 + z as usize] = 1;
    }
    TextVector(v)
}

/// Parse and encode in one step.
pub fn compile_report(text: &str) -> Result<TextVector> {
    parse_report(text).map(|ast| encode_vector(&ast))
}

fn count_phrase(n: u32) -> String {
    let word = match n {
        1..=9 => NUMBER_WORDS[n as usize - 1].to_string(),
        _ => n.to_string(),
    };
    let noun = if n == 1 { "area" } else { "areas" };
    format!("{word} infected {noun}")
}

/// Canonical report text for a vector; parses back to the same vector.
pub fn decode_vector(v: &TextVector) -> Result<String> {
    let v = TextVector::new(v.0)?;
    let left = v.zones(Side::Left);
    let right = v.zones(Side::Right);
    let ast = ReportAst::new(v.0[0] == 1, v.0[1], left, right)
        .map_err(|e| Error::InvalidVector(e.to_string()))?;
    if ast.lesion_count == 0 {
        return Ok("No pulmonary infection".into());
    }
    let mut lungs = Vec::new();
    for side in Side::ALL {
        let zones = ast.zones(side);
        if !zones.is_empty() {
            let words: Vec<&str> = zones.iter().map(Zone::word).collect();
            lungs.push(format!("{} {} lung", words.join(" "), side.word()));
        }
    }
    let prefix = if ast.bilateral { "Bilateral" } else { "Unilateral" };
    Ok(format!(
        "{prefix} pulmonary infection, {}, {}",
        count_phrase(ast.lesion_count),
        lungs.join(" and ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXEMPLAR: &str =
        "Bilateral pulmonary infection, two infected areas, upper middle left lung and middle lower right lung";

    fn zs(z: &[Zone]) -> ZoneSet {
        ZoneSet::from_zones(z.iter().copied())
    }

    #[test]
    fn parses_the_bilateral_exemplar() {
        let ast = parse_report(EXEMPLAR).unwrap();
        assert!(ast.bilateral());
        assert_eq!(ast.lesion_count(), 2);
        assert_eq!(ast.zones(Side::Left), zs(&[Zone::Upper, Zone::Middle]));
        assert_eq!(ast.zones(Side::Right), zs(&[Zone::Middle, Zone::Lower]));
        assert_eq!(encode_vector(&ast).values(), [1, 2, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn parses_unilateral_and_unmarked_laterality() {
        let ast = parse_report("Unilateral pulmonary infection, one infected area, upper left lung").unwrap();
        assert_eq!(ast, ReportAst::new(false, 1, zs(&[Zone::Upper]), ZoneSet::EMPTY).unwrap());

        let ast = parse_report("pulmonary infection, three infected areas, upper middle lower left lung").unwrap();
        assert_eq!(ast, ReportAst::new(false, 3, zs(&Zone::ALL), ZoneSet::EMPTY).unwrap());
    }

    #[test]
    fn encode_examples() {
        let ast = ReportAst::new(true, 2, zs(&[Zone::Lower]), zs(&[Zone::Upper])).unwrap();
        assert_eq!(encode_vector(&ast).values(), [1, 2, 0, 0, 1, 1, 0, 0]);
        assert_eq!(encode_vector(&ReportAst::empty()).values(), [0; 8]);
    }

    #[test]
    fn decode_examples() {
        let v = TextVector::new([1, 2, 1, 1, 0, 0, 1, 1]).unwrap();
        assert_eq!(decode_vector(&v).unwrap(), EXEMPLAR);
        assert_eq!(decode_vector(&TextVector::zero()).unwrap(), "No pulmonary infection");
        let v = TextVector::new([0, 1, 0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(
            decode_vector(&v).unwrap(),
            "Unilateral pulmonary infection, one infected area, lower right lung"
        );
    }

    #[test]
    fn zone_order_and_case_do_not_matter() {
        let a = parse_report("BILATERAL pulmonary infection; 2 areas, middle upper left lung, lower middle right lung.")
            .unwrap();
        assert_eq!(a, parse_report(EXEMPLAR).unwrap());
    }

    #[test]
    fn large_counts_use_digits() {
        let ast = parse_report("Bilateral pulmonary infection, 12 infected areas, upper left lung and lower right lung")
            .unwrap();
        assert_eq!(ast.lesion_count(), 12);
        let text = decode_vector(&encode_vector(&ast)).unwrap();
        assert!(text.contains("12 infected areas"));
    }

    #[test]
    fn rejects_inconsistent_laterality() {
        let err = parse_report("Bilateral pulmonary infection, one infected area, upper left lung").unwrap_err();
        assert!(matches!(err, Error::InconsistentReport(_)));
        let err = parse_report("Unilateral pulmonary infection, two infected areas, upper left lung and upper right lung")
            .unwrap_err();
        assert!(matches!(err, Error::InconsistentReport(_)));
        let err = parse_report("pulmonary infection, two infected areas").unwrap_err();
        assert!(matches!(err, Error::InconsistentReport(_)));
    }

    #[test]
    fn rejects_unrecognised_structure() {
        for text in [
            "",
            "pneumonia everywhere",
            "Bilateral pulmonary infection, two infected areas, upper left kidney",
            "pulmonary infection, upper left lung",
            "pulmonary infection, one area, one area, upper left lung",
            "pulmonary infection, ten infected areas, upper left lung",
            "No pulmonary infection, upper left lung",
            "pulmonary infection, one infected area, left lung",
        ] {
            assert!(
                matches!(parse_report(text), Err(Error::UnparseableReport(_))),
                "{text:?} should be unparseable"
            );
        }
    }

    #[test]
    fn vector_validation() {
        assert!(TextVector::new([2, 1, 1, 0, 0, 0, 0, 0]).is_err());
        assert!(TextVector::new([0, 1, 3, 0, 0, 0, 0, 0]).is_err());
        assert!(TextVector::new([1, 1, 1, 0, 0, 0, 0, 0]).is_err());
        assert!(TextVector::from_reals(&[0.0, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).is_err());
        // Representable vectors that no report can express.
        let both_unilateral = TextVector::new([0, 2, 1, 0, 0, 1, 0, 0]).unwrap();
        assert!(matches!(decode_vector(&both_unilateral), Err(Error::InvalidVector(_))));
        let count_without_zones = TextVector::new([0, 3, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(matches!(decode_vector(&count_without_zones), Err(Error::InvalidVector(_))));
    }

    #[test]
    fn json_round_trip() {
        let v = TextVector::new([1, 2, 1, 1, 0, 0, 1, 1]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, "[1,2,1,1,0,0,1,1]");
        assert_eq!(v.to_string(), s);
        let back: TextVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
