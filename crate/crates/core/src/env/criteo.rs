//! Criteo display-advertising TSV: a label, 13 integer fields and 26 hex
//! categorical fields, tab separated, empty meaning absent.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextFeatures, UserId, UserProfile};
use crate::error::{Error, Result};
use crate::numkit::stable_hash;

pub const CRITEO_INT_FIELDS: usize = 13;
pub const CRITEO_CAT_FIELDS: usize = 26;
pub const CRITEO_FIELDS: usize = 1 + CRITEO_INT_FIELDS + CRITEO_CAT_FIELDS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriteoRecord {
    pub label: u8,
    pub ints: Vec<Option<i64>>,
    pub cats: Vec<Option<String>>,
}

/// [`parse_criteo_line_at`] for a line reported as line 1.
pub fn parse_criteo_line(line: &str) -> Result<CriteoRecord> {
    parse_criteo_line_at(line, 1)
}

/// Parses one line. Errors carry the line number and the 1-based field.
pub fn parse_criteo_line_at(line: &str, line_no: u64) -> Result<CriteoRecord> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let err = |field: usize, message: String| Error::Parse {
        line: line_no,
        field,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != CRITEO_FIELDS {
        let at = if fields.len() < CRITEO_FIELDS {
            fields.len() + 1
        } else {
            CRITEO_FIELDS + 1
        };
        return Err(err(
            at,
            format!("expected {CRITEO_FIELDS} tab-separated fields, found {}", fields.len()),
        ));
    }
    let label = match fields[0] {
        "0" => 0,
        "1" => 1,
        other => return Err(err(1, format!("label must be 0 or 1, got {other:?}"))),
    };
    let mut ints = Vec::with_capacity(CRITEO_INT_FIELDS);
    for (k, raw) in fields[1..=CRITEO_INT_FIELDS].iter().enumerate() {
        if raw.is_empty() {
            ints.push(None);
            continue;
        }
        let v = raw
            .parse::<i64>()
            .map_err(|_| err(k + 2, format!("integer field holds {raw:?}")))?;
        ints.push(Some(v));
    }
    let mut cats = Vec::with_capacity(CRITEO_CAT_FIELDS);
    for (k, raw) in fields[1 + CRITEO_INT_FIELDS..].iter().enumerate() {
        if raw.is_empty() {
            cats.push(None);
            continue;
        }
        if raw.len() > 16 || !raw.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(err(
                k + 2 + CRITEO_INT_FIELDS,
                format!("categorical field holds non-hex token {raw:?}"),
            ));
        }
        cats.push(Some(raw.to_string()));
    }
    Ok(CriteoRecord { label, ints, cats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteoFeatureConfig {
    pub user_dim: usize,
    pub context_dim: usize,
}

impl Default for CriteoFeatureConfig {
    fn default() -> Self {
        Self {
            user_dim: 16,
            context_dim: 8,
        }
    }
}

fn signed_log(x: i64) -> f64 {
    let x = x as f64;
    x.signum() * x.abs().ln_1p()
}

/// Signed bucket for categorical field `k` holding `token`, over
/// `user_dim + context_dim` buckets.
pub(crate) fn cat_bucket(k: usize, token: &str, n_buckets: usize) -> (usize, f64) {
    let h = stable_hash(format!("{k}:{}", token.to_ascii_lowercase()).as_bytes());
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    ((h % n_buckets as u64) as usize, sign)
}

/// Hashes categoricals into `user_dim + context_dim` signed buckets (the
/// first `user_dim` form the profile, the rest the context) and adds
/// `sign(x)·ln(1+|x|)` of integer `i` to context entry `i mod context_dim`.
pub fn criteo_to_features(record: &CriteoRecord, cfg: &CriteoFeatureConfig) -> Result<(UserProfile, ContextFeatures)> {
    if cfg.user_dim == 0 || cfg.context_dim == 0 {
        return Err(Error::Config("Criteo feature dimensions must be positive".into()));
    }
    let n = cfg.user_dim + cfg.context_dim;
    let mut u = vec![0.0; cfg.user_dim];
    let mut c = vec![0.0; cfg.context_dim];
    let mut id_hash = 0u64;
    for (k, tok) in record.cats.iter().enumerate() {
        if let Some(tok) = tok {
            let (b, s) = cat_bucket(k, tok, n);
            if b < cfg.user_dim {
                u[b] += s;
            } else {
                c[b - cfg.user_dim] += s;
            }
            if k < 2 {
                id_hash ^= stable_hash(tok.as_bytes()).rotate_left(k as u32 * 17);
            }
        }
    }
    for (i, v) in record.ints.iter().enumerate() {
        if let Some(v) = v {
            c[i % cfg.context_dim] += signed_log(*v);
        }
    }
    let user_id = UserId(id_hash);
    Ok((UserProfile { user_id, u }, ContextFeatures { timestamp: 0, c }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub sampling_rate: f64,
    pub seed: u64,
    /// Abort on the first malformed line instead of skipping it.
    pub strict: bool,
    pub features: CriteoFeatureConfig,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            sampling_rate: 1.0,
            seed: 0,
            strict: false,
            features: CriteoFeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub line: u64,
    pub profile: UserProfile,
    pub context: ContextFeatures,
    pub label: u8,
}

/// Streams features and labels from a Criteo file, one line at a time.
pub struct ReplaySource<B: BufRead = BufReader<File>> {
    reader: B,
    cfg: ReplayConfig,
    rng: ChaCha8Rng,
    line_no: u64,
    skipped: u64,
    finished: bool,
    buf: String,
}

impl ReplaySource<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, cfg: ReplayConfig) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        Self::from_reader(BufReader::new(file), cfg)
    }
}

impl<B: BufRead> ReplaySource<B> {
    pub fn from_reader(reader: B, cfg: ReplayConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.sampling_rate) {
            return Err(Error::Config(format!("sampling rate {} outside [0, 1]", cfg.sampling_rate)));
        }
        Ok(Self {
            reader,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            line_no: 0,
            skipped: 0,
            finished: false,
            buf: String::new(),
        })
    }

    /// Malformed lines skipped so far (lenient mode).
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn lines_read(&self) -> u64 {
        self.line_no
    }
}

impl<B: BufRead> Iterator for ReplaySource<B> {
    type Item = Result<ReplayRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.finished {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => self.finished = true,
                Ok(_) => {
                    self.line_no += 1;
                    let record = match parse_criteo_line_at(&self.buf, self.line_no) {
                        Ok(r) => r,
                        Err(e) if self.cfg.strict => {
                            self.finished = true;
                            return Some(Err(e));
                        }
                        Err(e) => {
                            log::debug!("skipping malformed replay line: {e}");
                            self.skipped += 1;
                            continue;
                        }
                    };
                    if self.rng.random::<f64>() >= self.cfg.sampling_rate {
                        continue;
                    }
                    return Some(criteo_to_features(&record, &self.cfg.features).map(|(profile, mut context)| {
                        context.timestamp = self.line_no;
                        ReplayRecord {
                            line: self.line_no,
                            profile,
                            context,
                            label: record.label,
                        }
                    }));
                }
                Err(e) => {
                    self.finished = true;
                    return Some(Err(e.into()));
                }
            }
        }
        None
    }
}

/// `replay_source(path, config)`.
pub fn replay_source(path: impl AsRef<Path>, cfg: ReplayConfig) -> Result<ReplaySource> {
    ReplaySource::open(path, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_missing_line() {
        let line = format!("0{}", "\t".repeat(39));
        let r = parse_criteo_line(&line).unwrap();
        assert_eq!(r.label, 0);
        assert!(r.ints.iter().all(Option::is_none));
        assert!(r.cats.iter().all(Option::is_none));
        let (u, c) = criteo_to_features(&r, &CriteoFeatureConfig::default()).unwrap();
        assert!(u.u.iter().all(|x| *x == 0.0));
        assert!(c.c.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn short_line_names_field_40() {
        let line = format!("1{}", "\t".repeat(38));
        match parse_criteo_line_at(&line, 7) {
            Err(Error::Parse { line, field, .. }) => assert_eq!((line, field), (7, 40)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_fields_are_positioned() {
        let mut fields = vec![""; 40];
        fields[0] = "2";
        assert!(matches!(parse_criteo_line(&fields.join("\t")), Err(Error::Parse { field: 1, .. })));
        fields[0] = "1";
        fields[3] = "x1";
        assert!(matches!(parse_criteo_line(&fields.join("\t")), Err(Error::Parse { field: 4, .. })));
        fields[3] = "-1";
        fields[20] = "zz12";
        assert!(matches!(parse_criteo_line(&fields.join("\t")), Err(Error::Parse { field: 21, .. })));
        fields[20] = "a1b2c3d4";
        let r = parse_criteo_line(&fields.join("\t")).unwrap();
        assert_eq!(r.ints[2], Some(-1));
        assert_eq!(r.cats[6].as_deref(), Some("a1b2c3d4"));
        let long = format!("{}\t", fields.join("\t"));
        assert!(matches!(parse_criteo_line(&long), Err(Error::Parse { field: 41, .. })));
    }

    #[test]
    fn zero_integer_contributes_nothing() {
        let mut fields = vec![""; 40];
        fields[0] = "0";
        fields[1] = "0";
        let r = parse_criteo_line(&fields.join("\t")).unwrap();
        let (_, c) = criteo_to_features(&r, &CriteoFeatureConfig::default()).unwrap();
        assert!(c.c.iter().all(|x| *x == 0.0));
    }
}
