//! Labeled PBM samples and their on-disk formats.
//!
//! Binary layout: a UTF-8 text header of `key value` lines ending with
//! `end_header`, followed by little-endian records
//! `u32 location_set, u32 combo (1-based), u8 split, f64 sum_rate, f64 × pbm_len`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::error::{check_len, Error, Result};

pub const SAMPLES_MAGIC: &str = "probeopt-samples";
pub const SAMPLES_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Split::Train,
            1 => Split::Validation,
            2 => Split::Test,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// 70/15/15 assignment by location-set index.
    pub fn for_location_set(index: usize, total: usize) -> Self {
        let train = (total * 70).div_ceil(100);
        let validation = (total * 85).div_ceil(100);
        if index < train {
            Split::Train
        } else if index < validation {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// One `(r, R_sum)` pair with its probing combination (0-based) and split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub location_set: u32,
    pub combo: u32,
    pub split: Split,
    pub pbm: Vec<f64>,
    pub sum_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub users: usize,
    pub pbm_len: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Fails when any sample is tagged as test data.
pub fn ensure_no_test(samples: &[LabeledSample]) -> Result<()> {
    match samples.iter().find(|s| s.split == Split::Test) {
        Some(s) => Err(Error::ContractViolation(format!(
            "test sample (location set {}, combo {}) offered as training input",
            s.location_set,
            s.combo + 1
        ))),
        None => Ok(()),
    }
}

pub fn write_samples(w: &mut impl Write, header: &DatasetHeader, samples: &[LabeledSample]) -> Result<()> {
    writeln!(w, "{SAMPLES_MAGIC} {SAMPLES_VERSION}")?;
    writeln!(w, "endianness little")?;
    writeln!(w, "record u32:location_set u32:combo u8:split f64:sum_rate f64[pbm_len]:pbm")?;
    writeln!(w, "users {}", header.users)?;
    writeln!(w, "pbm_len {}", header.pbm_len)?;
    writeln!(w, "count {}", samples.len())?;
    writeln!(w, "config_hash {}", header.config_hash)?;
    writeln!(w, "seed {}", header.seed)?;
    writeln!(w, "end_header")?;
    for s in samples {
        check_len("sample PBM", header.pbm_len, s.pbm.len())?;
        put_u32(w, s.location_set)?;
        put_u32(w, s.combo + 1)?;
        put_u8(w, s.split.code())?;
        put_f64(w, s.sum_rate)?;
        for &v in &s.pbm {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_samples(r: &mut impl BufRead, origin: &Path) -> Result<(DatasetHeader, Vec<LabeledSample>)> {
    let bad = |d: String| Error::format(origin, d);
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::format(origin, "header ended early"));
        }
        Ok(line.trim_end().to_string())
    };
    let first = next_line(r)?;
    if first != format!("{SAMPLES_MAGIC} {SAMPLES_VERSION}") {
        return Err(bad(format!("unrecognized header line {first:?}")));
    }
    let (mut users, mut pbm_len, mut count, mut hash, mut seed) = (None, None, None, None, None);
    loop {
        let l = next_line(r)?;
        if l == "end_header" {
            break;
        }
        let (key, value) = l.split_once(' ').ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
        let num = || value.parse::<u64>().map_err(|_| bad(format!("{key} is not an integer")));
        match key {
            "endianness" if value != "little" => return Err(bad(format!("unsupported endianness {value}"))),
            "users" => users = Some(num()? as usize),
            "pbm_len" => pbm_len = Some(num()? as usize),
            "count" => count = Some(num()? as usize),
            "config_hash" => hash = Some(value.to_string()),
            "seed" => seed = Some(num()?),
            _ => {}
        }
    }
    let missing = |k: &str| bad(format!("header lacks {k}"));
    let header = DatasetHeader {
        users: users.ok_or_else(|| missing("users"))?,
        pbm_len: pbm_len.ok_or_else(|| missing("pbm_len"))?,
        config_hash: hash.ok_or_else(|| missing("config_hash"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
    };
    let count = count.ok_or_else(|| missing("count"))?;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let location_set = get_u32(r)?;
        let combo = get_u32(r)?;
        let split = Split::from_code(get_u8(r)?).ok_or_else(|| bad(format!("record {i} has a bad split code")))?;
        if combo == 0 {
            return Err(bad(format!("record {i} has combo 0 (combos are 1-based)")));
        }
        let sum_rate = get_f64(r)?;
        let pbm = (0..header.pbm_len).map(|_| get_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
        samples.push(LabeledSample {
            location_set,
            combo: combo - 1,
            split,
            pbm,
            sum_rate,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after the last record".into()));
    }
    Ok((header, samples))
}

pub fn save_samples(path: &Path, header: &DatasetHeader, samples: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_samples(&mut w, header, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<(DatasetHeader, Vec<LabeledSample>)> {
    let file = File::open(path).map_err(|_| Error::Missing(path.into()))?;
    read_samples(&mut BufReader::new(file), path)
}

/// CSV with 1-based combos: `location_set,combo,split,sum_rate,r0,r1,...`.
pub fn write_samples_csv(w: &mut impl Write, samples: &[LabeledSample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.pbm.len());
    write!(w, "location_set,combo,split,sum_rate")?;
    for k in 0..d {
        write!(w, ",r{k}")?;
    }
    writeln!(w)?;
    for s in samples {
        write!(w, "{},{},{},{}", s.location_set, s.combo + 1, s.split.name(), s.sum_rate)?;
        for v in &s.pbm {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples() -> Vec<LabeledSample> {
        vec![
            LabeledSample {
                location_set: 0,
                combo: 0,
                split: Split::Train,
                pbm: vec![1e-9, 2e-10],
                sum_rate: 7.5,
            },
            LabeledSample {
                location_set: 9,
                combo: 7,
                split: Split::Test,
                pbm: vec![0.0, 3e-11],
                sum_rate: 0.25,
            },
        ]
    }

    fn header() -> DatasetHeader {
        DatasetHeader {
            users: 1,
            pbm_len: 2,
            config_hash: "abc123".into(),
            seed: 42,
        }
    }

    #[test]
    fn binary_round_trip() {
        let mut buf = Vec::new();
        write_samples(&mut buf, &header(), &samples()).unwrap();
        let (h, s) = read_samples(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(h, header());
        assert_eq!(s, samples());

        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_samples(&mut extra.as_slice(), Path::new("mem")).is_err());
        assert!(read_samples(&mut &buf[..buf.len() - 4], Path::new("mem")).is_err());
        let text = String::from_utf8_lossy(&buf[..40]).to_string();
        assert!(text.starts_with("probeopt-samples 1\nendianness little\n"));
    }

    #[test]
    fn split_proportions() {
        let splits: Vec<Split> = (0..200).map(|i| Split::for_location_set(i, 200)).collect();
        let count = |s| splits.iter().filter(|x| **x == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (140, 30, 30));
        assert!(splits.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn provenance_guard() {
        assert!(ensure_no_test(&samples()[..1]).is_ok());
        assert!(matches!(ensure_no_test(&samples()), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn csv_is_one_based() {
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "location_set,combo,split,sum_rate,r0,r1");
        assert!(lines[2].starts_with("9,8,test,0.25,"));
    }
}
