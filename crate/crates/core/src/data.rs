//! Samples, datasets and the line-delimited dataset file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmask;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub type TokenId = u32;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

impl<const N: usize> From<[TokenId; N]> for TokenSeq {
    fn from(v: [TokenId; N]) -> Self {
        TokenSeq(v.to_vec())
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

/// Binary per-token mask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MaskVec(Vec<bool>);

impl MaskVec {
    pub fn new(bits: Vec<bool>) -> Self {
        MaskVec(bits)
    }

    pub fn zeros(len: usize) -> Self {
        MaskVec(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        MaskVec(vec![true; len])
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidSample(format!(
                    "mask bit {other} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(MaskVec)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }
}

/// An (instruction, output) pair for standard instruction tuning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSample {
    pub instruction: TokenSeq,
    pub output: TokenSeq,
}

impl InstructionSample {
    pub fn new(instruction: TokenSeq, output: TokenSeq) -> Result<Self> {
        if output.is_empty() {
            return Err(Error::InvalidSample(
                "instruction sample has an empty output".into(),
            ));
        }
        Ok(InstructionSample {
            instruction,
            output,
        })
    }
}

/// Class key used for oversampling and rebalancing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassKey {
    pub cwe: String,
    pub language: String,
}

/// A secure/vulnerable program pair with its diff masks.
///
/// Fields are private so the masks can only come from [`diffmask::build_masks`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityTriple {
    instruction: TokenSeq,
    secure_out: TokenSeq,
    vuln_out: TokenSeq,
    sec_mask: MaskVec,
    vul_mask: MaskVec,
    cwe: String,
    language: String,
}

impl SecurityTriple {
    pub fn new(
        instruction: TokenSeq,
        secure_out: TokenSeq,
        vuln_out: TokenSeq,
        cwe: impl Into<String>,
        language: impl Into<String>,
    ) -> Result<Self> {
        if secure_out == vuln_out {
            return Err(Error::InvalidSample(
                "secure and vulnerable outputs are identical".into(),
            ));
        }
        let (sec_mask, vul_mask) = diffmask::build_masks(&secure_out, &vuln_out);
        Ok(SecurityTriple {
            instruction,
            secure_out,
            vuln_out,
            sec_mask,
            vul_mask,
            cwe: cwe.into(),
            language: language.into(),
        })
    }

    /// Test hook: replaces the masks without validation. Used to exercise
    /// masked losses with arbitrary masks.
    pub fn with_masks(mut self, sec_mask: MaskVec, vul_mask: MaskVec) -> Result<Self> {
        if sec_mask.len() != self.secure_out.len() || vul_mask.len() != self.vuln_out.len() {
            return Err(Error::InvalidSample(
                "mask length differs from its sequence".into(),
            ));
        }
        self.sec_mask = sec_mask;
        self.vul_mask = vul_mask;
        Ok(self)
    }

    pub fn instruction(&self) -> &TokenSeq {
        &self.instruction
    }
    pub fn secure_out(&self) -> &TokenSeq {
        &self.secure_out
    }
    pub fn vuln_out(&self) -> &TokenSeq {
        &self.vuln_out
    }
    pub fn sec_mask(&self) -> &MaskVec {
        &self.sec_mask
    }
    pub fn vul_mask(&self) -> &MaskVec {
        &self.vul_mask
    }
    pub fn cwe(&self) -> &str {
        &self.cwe
    }
    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn class_key(&self) -> ClassKey {
        ClassKey {
            cwe: self.cwe.clone(),
            language: self.language.clone(),
        }
    }

    /// At least one mask bit set on either side.
    pub fn has_signal(&self) -> bool {
        self.sec_mask.count_ones() + self.vul_mask.count_ones() > 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub std_samples: Vec<InstructionSample>,
    pub sec_samples: Vec<SecurityTriple>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.std_samples.len() + self.sec_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Std {
        instruction: String,
        output: String,
    },
    Sec {
        instruction: String,
        secure_out: String,
        vuln_out: String,
        cwe: String,
        language: String,
        sec_mask: Vec<u8>,
        vul_mask: Vec<u8>,
    },
}

/// Reads a dataset file, re-tokenizing every record and re-deriving masks.
pub fn load_dataset(path: &Path, tok: &Tokenizer) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds = Dataset::default();
    let mut sec_index = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let encode = |s: &str| tok.encode(s).map_err(|e| malformed(e.to_string()));
        match record {
            Record::Std {
                instruction,
                output,
            } => {
                let sample = InstructionSample::new(encode(&instruction)?, encode(&output)?)
                    .map_err(|e| malformed(e.to_string()))?;
                ds.std_samples.push(sample);
            }
            Record::Sec {
                instruction,
                secure_out,
                vuln_out,
                cwe,
                language,
                sec_mask,
                vul_mask,
            } => {
                let triple = SecurityTriple::new(
                    encode(&instruction)?,
                    encode(&secure_out)?,
                    encode(&vuln_out)?,
                    cwe,
                    language,
                )
                .map_err(|e| malformed(e.to_string()))?;
                let index = sec_index;
                sec_index += 1;
                check_mask(index, "sec", &sec_mask, triple.sec_mask())?;
                check_mask(index, "vul", &vul_mask, triple.vul_mask())?;
                ds.sec_samples.push(triple);
            }
        }
    }
    Ok(ds)
}

fn check_mask(index: usize, which: &'static str, stored: &[u8], expected: &MaskVec) -> Result<()> {
    if stored != expected.to_bits().as_slice() {
        return Err(Error::MaskMismatch {
            index,
            which,
            expected: expected.to_bits(),
        });
    }
    Ok(())
}

/// Writes standard samples first, then security triples, each in order.
pub fn save_dataset(ds: &Dataset, path: &Path, tok: &Tokenizer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w, tok)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: &mut W, tok: &Tokenizer) -> Result<()> {
    for s in &ds.std_samples {
        let rec = Record::Std {
            instruction: tok.decode(&s.instruction),
            output: tok.decode(&s.output),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    for t in &ds.sec_samples {
        let rec = Record::Sec {
            instruction: tok.decode(&t.instruction),
            secure_out: tok.decode(&t.secure_out),
            vuln_out: tok.decode(&t.vuln_out),
            cwe: t.cwe.clone(),
            language: t.language.clone(),
            sec_mask: t.sec_mask.to_bits(),
            vul_mask: t.vul_mask.to_bits(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang;

    fn tok() -> Tokenizer {
        minilang::tokenizer()
    }

    fn triple(t: &Tokenizer) -> SecurityTriple {
        SecurityTriple::new(
            t.encode("Write a py function named make_key .").unwrap(),
            t.encode("def make_key ( ) : key = rsa . generate ( bits = 2048 ) return key end")
                .unwrap(),
            t.encode("def make_key ( ) : key = rsa . generate ( bits = 1024 ) return key end")
                .unwrap(),
            "CWE-326",
            "py",
        )
        .unwrap()
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p, &tok()).unwrap().is_empty());
    }

    #[test]
    fn single_sec_record() {
        let t = tok();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        let ds = Dataset {
            std_samples: vec![],
            sec_samples: vec![triple(&t)],
        };
        save_dataset(&ds, &p, &t).unwrap();
        let back = load_dataset(&p, &t).unwrap();
        assert_eq!(back.sec_samples.len(), 1);
        assert_eq!(back.std_samples.len(), 0);
        assert_eq!(back, ds);
    }

    #[test]
    fn flipped_mask_bit_is_rejected() {
        let t = tok();
        let tr = triple(&t);
        let mut bits = tr.sec_mask().to_bits();
        bits[0] ^= 1;
        let line = serde_json::json!({
            "kind": "sec",
            "instruction": t.decode(tr.instruction()),
            "secure_out": t.decode(tr.secure_out()),
            "vuln_out": t.decode(tr.vuln_out()),
            "cwe": "CWE-326",
            "language": "py",
            "sec_mask": bits,
            "vul_mask": tr.vul_mask().to_bits(),
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, format!("{line}\n")).unwrap();
        match load_dataset(&p, &t).unwrap_err() {
            Error::MaskMismatch {
                index,
                which,
                expected,
            } => {
                assert_eq!(index, 0);
                assert_eq!(which, "sec");
                assert_eq!(expected, tr.sec_mask().to_bits());
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"kind\":\"std\",\"instruction\":\"a\",\"output\":\"x\"}\n{\"kind\":\"std\"\n",
        )
        .unwrap();
        match load_dataset(&p, &tok()).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn identical_pair_is_invalid() {
        let t = tok();
        let o = t.encode("def f ( ) : return none end").unwrap();
        assert!(SecurityTriple::new(TokenSeq::default(), o.clone(), o, "CWE-476", "py").is_err());
    }

    #[test]
    fn empty_output_is_invalid() {
        assert!(InstructionSample::new(TokenSeq::from([5]), TokenSeq::default()).is_err());
    }
}
