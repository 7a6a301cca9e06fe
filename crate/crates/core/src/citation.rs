//! Extraction of Spanish legal citations.
//!
//! The accepted grammar, informally:
//!
//! ```text
//! citation   := abbr_form | long_form | english_form | article
//! abbr_form  := ABBR chamber? region? section? number_mark? NUM "/" YEAR date?
//! ABBR       := "STS" | "ATS" | "STC" | "ATC" | "SAN" | "AAN"
//!             | "SAP" | "AAP" | "STSJ" | "ATSJ"
//! long_form  := ("Sentencia" | "Auto") ("del" | "de la") body chamber? number_mark? NUM "/" YEAR date?
//! body       := "Tribunal Supremo" | "Tribunal Constitucional" | "Audiencia Nacional"
//!             | "Audiencia Provincial de" REGION | "Tribunal Superior de Justicia de" REGION
//! article    := ("art." | "arts." | "artículo") NUM ("." SUB)? ("de la" | "del")? CODE YEAR?
//! date       := ","? "de" DAY "de" MONTH ("de" YEAR)?
//! ```
//!
//! Regional courts (`SAP`, `AAP`, `STSJ`, `ATSJ`) require a region; the
//! remaining abbreviations reject one. Matches that fail validation (number
//! zero, year outside 1800..=2100, impossible dates) are skipped and logged.

use std::cmp::Ordering;
use std::fmt;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "name")]
pub enum Court {
    SupremeCourt,
    ConstitutionalCourt,
    NationalCourt,
    ProvincialCourt(String),
    HighCourtOfJustice(String),
    /// Issuing code of a statute article (`CE`, `LEC`...).
    Code(String),
    Other(String),
}

impl Court {
    fn identity(&self) -> (u8, String) {
        match self {
            Court::SupremeCourt => (0, String::new()),
            Court::ConstitutionalCourt => (1, String::new()),
            Court::NationalCourt => (2, String::new()),
            Court::ProvincialCourt(p) => (3, p.to_lowercase()),
            Court::HighCourtOfJustice(r) => (4, r.to_lowercase()),
            Court::Code(c) => (5, c.to_lowercase()),
            Court::Other(o) => (6, o.to_lowercase()),
        }
    }

    /// Courts are compatible when they denote the same body (regions compared
    /// case-insensitively).
    pub fn same_body(&self, other: &Court) -> bool {
        self.identity() == other.identity()
    }

    pub fn slug(&self) -> String {
        match self {
            Court::SupremeCourt => "supreme-court".into(),
            Court::ConstitutionalCourt => "constitutional-court".into(),
            Court::NationalCourt => "national-court".into(),
            Court::ProvincialCourt(p) => format!("provincial-court-{}", p.to_lowercase().replace(' ', "-")),
            Court::HighCourtOfJustice(r) => format!("high-court-{}", r.to_lowercase().replace(' ', "-")),
            Court::Code(c) => format!("code-{}", c.to_lowercase()),
            Court::Other(o) => o.to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CitationKind {
    Judgment,
    Order,
    StatuteArticle,
}

/// A parsed reference to a legal source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CitationKey {
    pub court: Court,
    /// Chamber of the Supreme Court when stated (2 = criminal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chamber: Option<u8>,
    pub number: u32,
    pub year: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    pub kind: CitationKind,
    /// Paragraph of a statute article (`24.2` → `"2"`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdivision: Option<String>,
    /// Matched text, verbatim.
    pub raw: String,
    /// Byte span of `raw` in the source text.
    pub span: (usize, usize),
}

impl CitationKey {
    /// Canonical textual form; parses back to an equal key.
    pub fn normalized(&self) -> String {
        let ny = format!("{}/{}", self.number, self.year);
        match self.kind {
            CitationKind::StatuteArticle => {
                let code = match &self.court {
                    Court::Code(c) | Court::Other(c) => c.clone(),
                    other => other.slug(),
                };
                let mut s = format!("art. {}", self.number);
                if let Some(sub) = &self.subdivision {
                    s.push('.');
                    s.push_str(sub);
                }
                s.push(' ');
                s.push_str(&code);
                if default_code_year(&code) != Some(self.year) {
                    s.push_str(&format!(" {}", self.year));
                }
                s
            }
            kind => {
                let judgment = kind == CitationKind::Judgment;
                let prefix = |s: &str, a: &str| if judgment { s.to_string() } else { a.to_string() };
                match &self.court {
                    Court::SupremeCourt => format!("{} {ny}", prefix("STS", "ATS")),
                    Court::ConstitutionalCourt => format!("{} {ny}", prefix("STC", "ATC")),
                    Court::NationalCourt => format!("{} {ny}", prefix("SAN", "AAN")),
                    Court::ProvincialCourt(p) => format!("{} {p} {ny}", prefix("SAP", "AAP")),
                    Court::HighCourtOfJustice(r) => format!("{} {r} {ny}", prefix("STSJ", "ATSJ")),
                    Court::Code(c) | Court::Other(c) => format!("{c} {ny}"),
                }
            }
        }
    }

    fn identity(&self) -> ((u8, String), CitationKind, u32, i32, Option<&str>) {
        (self.court.identity(), self.kind, self.number, self.year, self.subdivision.as_deref())
    }

    /// Same reference, ignoring raw text, span, date and chamber.
    pub fn same_reference(&self, other: &CitationKey) -> bool {
        self.identity() == other.identity()
    }

    pub fn is_statute(&self) -> bool {
        self.kind == CitationKind::StatuteArticle
    }
}

impl PartialEq for CitationKey {
    fn eq(&self, other: &Self) -> bool {
        self.same_reference(other)
    }
}

impl Eq for CitationKey {}

impl PartialOrd for CitationKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CitationKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.identity().cmp(&other.identity())
    }
}

impl std::hash::Hash for CitationKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.identity().hash(state);
    }
}

impl fmt::Display for CitationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CitationParseError {
    #[error("no citation found in {0:?}")]
    NotFound(String),
    #[error("{0:?} is not a single citation")]
    Trailing(String),
}

impl std::str::FromStr for CitationKey {
    type Err = CitationParseError;

    /// Parses a string that consists of exactly one citation.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let mut found = parse_citations(trimmed);
        match found.len() {
            0 => Err(CitationParseError::NotFound(s.to_string())),
            1 if found[0].span == (0, trimmed.len()) => Ok(found.remove(0)),
            _ => Err(CitationParseError::Trailing(s.to_string())),
        }
    }
}

/// Serde helper storing keys as their normalized string.
pub mod as_string {
    use super::CitationKey;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &CitationKey, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&key.normalized())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CitationKey, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }

    pub mod vec {
        use super::super::CitationKey;
        use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(keys: &[CitationKey], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(keys.len()))?;
            for k in keys {
                seq.serialize_element(&k.normalized())?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CitationKey>, D::Error> {
            let v = Vec::<String>::deserialize(d)?;
            v.iter().map(|s| s.parse().map_err(D::Error::custom)).collect()
        }
    }

    pub mod opt {
        use super::super::CitationKey;
        use serde::{de::Error, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(key: &Option<CitationKey>, s: S) -> Result<S::Ok, S::Error> {
            match key {
                Some(k) => s.serialize_some(&k.normalized()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CitationKey>, D::Error> {
            match Option::<String>::deserialize(d)? {
                Some(s) => s.parse().map(Some).map_err(D::Error::custom),
                None => Ok(None),
            }
        }
    }
}

const CODES: &[(&str, &str, i32)] = &[
    // (surface form, code, default year)
    ("Constitución Española", "CE", 1978),
    ("Constitución", "CE", 1978),
    ("Código Penal", "CP", 1995),
    ("Código Civil", "CC", 1889),
    ("Ley de Enjuiciamiento Criminal", "LECrim", 1882),
    ("Ley de Enjuiciamiento Civil", "LEC", 2000),
    ("Ley Orgánica del Poder Judicial", "LOPJ", 1985),
    ("Estatuto de los Trabajadores", "ET", 2015),
    ("LECrim", "LECrim", 1882),
    ("LOPJ", "LOPJ", 1985),
    ("LEC", "LEC", 2000),
    ("LAU", "LAU", 1994),
    ("CE", "CE", 1978),
    ("CP", "CP", 1995),
    ("CC", "CC", 1889),
    ("ET", "ET", 2015),
];

fn default_code_year(code: &str) -> Option<i32> {
    CODES.iter().find(|(_, c, _)| *c == code).map(|(_, _, y)| *y)
}

const MONTHS: &[&str] = &[
    "enero", "febrero", "marzo", "abril", "mayo", "junio", "julio", "agosto", "septiembre",
    "octubre", "noviembre", "diciembre",
];

const REGION: &str = r"(?:\p{Lu}[\p{L}]*)(?:\s+(?:de\s+|del\s+)?\p{Lu}[\p{L}]*)*";
const NUMBER_MARK: &str = r"(?:(?:núm\.|num\.|nº|n\.º|número|No\.)\s*)?";
const NUM_YEAR: &str = r"(?P<num>\d{1,5})\s*/\s*(?P<year>\d{4})\b";

static DATE_TAIL: LazyLock<String> = LazyLock::new(|| {
    format!(
        r"(?:,?\s+de\s+(?P<day>\d{{1,2}})\s+de\s+(?P<month>{})(?:\s+de\s+(?P<dyear>\d{{4}}))?)?",
        MONTHS.join("|")
    )
});

static ABBR_FORM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b(?P<abbr>STSJ|ATSJ|STS|ATS|STC|ATC|SAN|AAN|SAP|AAP)\b(?:\s*\((?P<chamber>[^)]{{1,40}})\))?(?:\s+(?:de\s+)?(?P<region>{REGION}))?(?:,?\s*(?:Secci[oó]n|Sec\.)\s*\d+ª?)?,?\s*{NUMBER_MARK}{NUM_YEAR}{}",
        *DATE_TAIL
    ))
    .expect("abbreviated citation grammar")
});

static LONG_FORM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b(?P<kind>Sentencia|Auto)\s+(?:del|de\s+la)\s+(?P<body>Tribunal\s+Supremo|Tribunal\s+Constitucional|Audiencia\s+Nacional|Audiencia\s+Provincial\s+de\s+(?P<prov>{REGION})|Tribunal\s+Superior\s+de\s+Justicia\s+de\s+(?P<reg>{REGION}))(?:\s*\((?P<chamber>[^)]{{1,40}})\)|,\s*(?P<chamber2>Sala\s+[^,\d]{{1,30}}),)?,?\s*{NUMBER_MARK}{NUM_YEAR}{}",
        *DATE_TAIL
    ))
    .expect("long-form citation grammar")
});

static ENGLISH_FORM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b(?P<body>Supreme\s+Court|Constitutional\s+Court|National\s+High\s+Court|Provincial\s+Court\s+of\s+(?P<prov>{REGION}))\s+(?P<kind>Judgment|Order)\s+{NUMBER_MARK}{NUM_YEAR}"
    ))
    .expect("english citation grammar")
});

static ARTICLE: LazyLock<Regex> = LazyLock::new(|| {
    let codes: Vec<String> = CODES.iter().map(|(s, _, _)| s.replace(' ', r"\s+")).collect();
    Regex::new(&format!(
        r"\b[Aa]rt(?:ículo|iculo|s)?\.?\s*(?P<art>\d{{1,4}})(?:\.(?P<sub>\d{{1,3}}))?(?:\s+(?:de\s+la|del|de))?\s+(?P<code>{})\b(?:\s+(?:de\s+)?(?P<cyear>1[89]\d{{2}}|20\d{{2}})\b)?",
        codes.join("|")
    ))
    .expect("statute article grammar")
});

fn chamber_number(text: &str) -> Option<u8> {
    let t = text.to_lowercase();
    let table: [(&[&str], u8); 5] = [
        (&["1ª", "primera", "civil", "1.ª", "sala 1"], 1),
        (&["2ª", "segunda", "penal", "2.ª", "sala 2"], 2),
        (&["3ª", "tercera", "contencioso", "3.ª", "sala 3"], 3),
        (&["4ª", "cuarta", "social", "4.ª", "sala 4"], 4),
        (&["5ª", "quinta", "militar", "5.ª", "sala 5"], 5),
    ];
    table
        .iter()
        .find(|(words, _)| words.iter().any(|w| t.contains(w)))
        .map(|(_, n)| *n)
}

fn parse_date(c: &Captures, year: i32) -> Result<Option<NaiveDate>, String> {
    let Some(day) = c.name("day") else { return Ok(None) };
    let month = c.name("month").map(|m| m.as_str()).unwrap_or_default();
    let m = MONTHS.iter().position(|x| *x == month).ok_or("bad month")? as u32 + 1;
    let y = match c.name("dyear") {
        Some(y) => y.as_str().parse::<i32>().map_err(|e| e.to_string())?,
        None => year,
    };
    let d: u32 = day.as_str().parse().map_err(|_| "bad day")?;
    NaiveDate::from_ymd_opt(y, m, d).map(Some).ok_or_else(|| format!("impossible date {d}/{m}/{y}"))
}

fn num_year(c: &Captures) -> Result<(u32, i32), String> {
    let number: u32 = c["num"].parse().map_err(|_| "bad number")?;
    let year: i32 = c["year"].parse().map_err(|_| "bad year")?;
    validate(number, year)?;
    Ok((number, year))
}

fn validate(number: u32, year: i32) -> Result<(), String> {
    if number < 1 {
        return Err("number must be at least 1".into());
    }
    if !(1800..=2100).contains(&year) {
        return Err(format!("year {year} out of range"));
    }
    Ok(())
}

fn build(c: &Captures, court: Court, kind: CitationKind, chamber: Option<u8>, text: &str) -> Result<CitationKey, String> {
    let (number, year) = num_year(c)?;
    let date = parse_date(c, year)?;
    let whole = c.get(0).expect("group 0");
    Ok(CitationKey {
        court,
        chamber,
        number,
        year,
        date,
        kind,
        subdivision: None,
        raw: text[whole.start()..whole.end()].to_string(),
        span: (whole.start(), whole.end()),
    })
}

fn from_abbr(c: &Captures, text: &str) -> Result<CitationKey, String> {
    let abbr = &c["abbr"];
    let region = c.name("region").map(|m| m.as_str().trim().to_string());
    let kind = if abbr.starts_with('S') { CitationKind::Judgment } else { CitationKind::Order };
    let regional = matches!(abbr, "SAP" | "AAP" | "STSJ" | "ATSJ");
    if regional && region.is_none() {
        return Err(format!("{abbr} without region"));
    }
    if !regional && region.is_some() {
        return Err(format!("unexpected region after {abbr}"));
    }
    let court = match abbr {
        "STS" | "ATS" => Court::SupremeCourt,
        "STC" | "ATC" => Court::ConstitutionalCourt,
        "SAN" | "AAN" => Court::NationalCourt,
        "SAP" | "AAP" => Court::ProvincialCourt(region.unwrap_or_default()),
        _ => Court::HighCourtOfJustice(region.unwrap_or_default()),
    };
    let chamber = c.name("chamber").and_then(|m| chamber_number(m.as_str()));
    build(c, court, kind, chamber, text)
}

fn from_long(c: &Captures, text: &str) -> Result<CitationKey, String> {
    let kind = if &c["kind"] == "Sentencia" { CitationKind::Judgment } else { CitationKind::Order };
    let body = c["body"].split_whitespace().collect::<Vec<_>>().join(" ");
    let court = if let Some(p) = c.name("prov") {
        Court::ProvincialCourt(p.as_str().trim().to_string())
    } else if let Some(r) = c.name("reg") {
        Court::HighCourtOfJustice(r.as_str().trim().to_string())
    } else {
        match body.as_str() {
            "Tribunal Supremo" => Court::SupremeCourt,
            "Tribunal Constitucional" => Court::ConstitutionalCourt,
            _ => Court::NationalCourt,
        }
    };
    let chamber = c
        .name("chamber")
        .or_else(|| c.name("chamber2"))
        .and_then(|m| chamber_number(m.as_str()));
    build(c, court, kind, chamber, text)
}

fn from_english(c: &Captures, text: &str) -> Result<CitationKey, String> {
    let kind = if &c["kind"] == "Judgment" { CitationKind::Judgment } else { CitationKind::Order };
    let body = c["body"].split_whitespace().collect::<Vec<_>>().join(" ");
    let court = if let Some(p) = c.name("prov") {
        Court::ProvincialCourt(p.as_str().trim().to_string())
    } else {
        match body.as_str() {
            "Supreme Court" => Court::SupremeCourt,
            "Constitutional Court" => Court::ConstitutionalCourt,
            _ => Court::NationalCourt,
        }
    };
    build(c, court, kind, None, text)
}

fn from_article(c: &Captures) -> Result<CitationKey, String> {
    let surface = c["code"].split_whitespace().collect::<Vec<_>>().join(" ");
    let (_, code, default_year) = CODES
        .iter()
        .find(|(s, _, _)| *s == surface)
        .ok_or_else(|| format!("unknown code {surface}"))?;
    let number: u32 = c["art"].parse().map_err(|_| "bad article")?;
    let year = match c.name("cyear") {
        Some(y) => y.as_str().parse().map_err(|_| "bad year")?,
        None => *default_year,
    };
    validate(number, year)?;
    let whole = c.get(0).expect("group 0");
    Ok(CitationKey {
        court: Court::Code((*code).to_string()),
        chamber: None,
        number,
        year,
        date: None,
        kind: CitationKind::StatuteArticle,
        subdivision: c.name("sub").map(|m| m.as_str().to_string()),
        raw: whole.as_str().to_string(),
        span: (whole.start(), whole.end()),
    })
}

/// Every citation occurrence in order, repeats included. Overlapping
/// matches resolve to the earliest, then longest.
pub fn citation_occurrences(text: &str) -> Vec<CitationKey> {
    let mut found: Vec<CitationKey> = Vec::new();
    let mut collect = |re: &Regex, f: &dyn Fn(&Captures) -> Result<CitationKey, String>| {
        for c in re.captures_iter(text) {
            match f(&c) {
                Ok(k) => found.push(k),
                Err(reason) => tracing::debug!(fragment = &c[0], %reason, "skipping unparseable citation"),
            }
        }
    };
    collect(&ABBR_FORM, &|c| from_abbr(c, text));
    collect(&LONG_FORM, &|c| from_long(c, text));
    collect(&ENGLISH_FORM, &|c| from_english(c, text));
    collect(&ARTICLE, &from_article);

    found.sort_by(|a, b| a.span.0.cmp(&b.span.0).then(b.span.1.cmp(&a.span.1)));
    let mut out: Vec<CitationKey> = Vec::new();
    let mut last_end = 0;
    for k in found {
        if k.span.0 < last_end {
            continue;
        }
        last_end = k.span.1;
        out.push(k);
    }
    out
}

/// Every citation in `text`, in order of first appearance, deduplicated by
/// normalized reference (the first span is kept).
pub fn parse_citations(text: &str) -> Vec<CitationKey> {
    let mut out: Vec<CitationKey> = Vec::new();
    for k in citation_occurrences(text) {
        if !out.iter().any(|o| o.same_reference(&k)) {
            out.push(k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(text: &str) -> CitationKey {
        let v = parse_citations(text);
        assert_eq!(v.len(), 1, "{text}: {v:?}");
        v.into_iter().next().unwrap()
    }

    #[test]
    fn supreme_court_abbreviation() {
        let k = one("Véase la STS 999/2025.");
        assert_eq!(k.court, Court::SupremeCourt);
        assert_eq!((k.number, k.year, k.kind), (999, 2025, CitationKind::Judgment));
        assert_eq!(k.raw, "STS 999/2025");
    }

    #[test]
    fn long_and_english_forms_agree() {
        let long = one("la Sentencia del Tribunal Supremo 999/2025 establece");
        let eng = one("Supreme Court Judgment 999/2025");
        assert!(long.same_reference(&eng));
        assert_eq!(long.normalized(), "STS 999/2025");
    }

    #[test]
    fn provincial_court_with_date() {
        let k = one("SAP Madrid 45/2019, de 15 de febrero, declaró");
        assert_eq!(k.court, Court::ProvincialCourt("Madrid".into()));
        assert_eq!(k.date, NaiveDate::from_ymd_opt(2019, 2, 15));
        assert_eq!(k.raw, "SAP Madrid 45/2019, de 15 de febrero");
    }

    #[test]
    fn chamber_is_recorded_not_identity() {
        let k = one("STS (Sala 2ª) 123/2020");
        assert_eq!(k.chamber, Some(2));
        assert!(k.same_reference(&one("STS 123/2020")));
    }

    #[test]
    fn statute_article() {
        let k = one("conforme al art. 24.2 CE");
        assert_eq!(k.court, Court::Code("CE".into()));
        assert_eq!((k.number, k.year, k.subdivision.as_deref()), (24, 1978, Some("2")));
        assert_eq!(k.normalized(), "art. 24.2 CE");
        let k2 = one("el artículo 24 de la Constitución");
        assert_eq!(k2.normalized(), "art. 24 CE");
        let old = one("art. 1 LEC 1881");
        assert_eq!(old.year, 1881);
        assert_eq!(old.normalized(), "art. 1 LEC 1881");
    }

    #[test]
    fn rejects_invalid() {
        assert!(parse_citations("STS 0/2020").is_empty());
        assert!(parse_citations("STS 12/1700").is_empty());
        assert!(parse_citations("SAP 45/2019").is_empty());
        assert!(parse_citations("nada que citar aquí").is_empty());
    }

    #[test]
    fn dedup_keeps_first_span() {
        let v = parse_citations("STS 1/2020 y luego la Sentencia del Tribunal Supremo 1/2020 otra vez");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].span.0, 0);
        assert_eq!(citation_occurrences("STS 1/2020 y STS 1/2020").len(), 2);
    }

    #[test]
    fn from_str_requires_whole_string() {
        assert!("STS 5/2001".parse::<CitationKey>().is_ok());
        assert!("STS 5/2001 y algo".parse::<CitationKey>().is_err());
        assert!("hola".parse::<CitationKey>().is_err());
    }

    #[test]
    fn orders_and_high_courts() {
        let k = one("ATS 77/2018");
        assert_eq!(k.kind, CitationKind::Order);
        let t = one("STSJ Cataluña 12/2017");
        assert_eq!(t.court, Court::HighCourtOfJustice("Cataluña".into()));
        let a = one("Auto de la Audiencia Provincial de Valencia 9/2016");
        assert_eq!(a.normalized(), "AAP Valencia 9/2016");
    }
}
