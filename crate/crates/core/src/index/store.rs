//! Binary index persistence. All integers are little-endian:
//!
//! ```text
//! magic   [u8; 4] = "CRIX"
//! version u32     = 1
//! n_docs  u64
//! n_docs x { docno_len u32, docno [u8], doc_len u32 }
//! n_terms u64
//! n_terms x { term_len u32, term [u8], collection_tf u64, df u32, df x { doc u32, tf u32 } }
//! ```
//!
//! Terms are written in byte order, so identical inputs give identical files.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{IndexError, InvertedIndex, Posting, TermEntry};

pub const INDEX_MAGIC: [u8; 4] = *b"CRIX";
pub const INDEX_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String, IndexError> {
    let len = get_u32(r).map_err(truncated)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| IndexError::Corrupt("string is not UTF-8".into()))
}

fn truncated(e: io::Error) -> IndexError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        IndexError::Corrupt("unexpected end of file".into())
    } else {
        IndexError::Io {
            context: "reading index".into(),
            source: e,
        }
    }
}

impl InvertedIndex {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        put_u32(w, INDEX_VERSION)?;
        put_u64(w, self.docnos.len() as u64)?;
        for (docno, &len) in self.docnos.iter().zip(&self.doc_lengths) {
            put_str(w, docno)?;
            put_u32(w, len)?;
        }
        put_u64(w, self.terms.len() as u64)?;
        for (term, entry) in &self.terms {
            put_str(w, term)?;
            put_u64(w, entry.collection_tf)?;
            put_u32(w, entry.postings.len() as u32)?;
            for p in &entry.postings {
                put_u32(w, p.doc)?;
                put_u32(w, p.tf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, IndexError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != INDEX_MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = get_u32(r).map_err(truncated)?;
        if version != INDEX_VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let mut index = InvertedIndex::default();
        let n_docs = get_u64(r).map_err(truncated)?;
        for _ in 0..n_docs {
            index.docnos.push(get_str(r)?);
            let len = get_u32(r).map_err(truncated)?;
            index.doc_lengths.push(len);
            index.total_length += u64::from(len);
        }
        let n_terms = get_u64(r).map_err(truncated)?;
        for _ in 0..n_terms {
            let term = get_str(r)?;
            let collection_tf = get_u64(r).map_err(truncated)?;
            let df = get_u32(r).map_err(truncated)?;
            let mut postings = Vec::with_capacity(df as usize);
            for _ in 0..df {
                let doc = get_u32(r).map_err(truncated)?;
                let tf = get_u32(r).map_err(truncated)?;
                postings.push(Posting { doc, tf });
            }
            if index
                .terms
                .insert(term.clone(), TermEntry { collection_tf, postings })
                .is_some()
            {
                return Err(IndexError::Corrupt(format!("duplicate term {term:?}")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(truncated)? != 0 {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        index.validate()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io {
            context: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let file = File::open(path).map_err(|source| IndexError::Io {
            context: path.display().to_string(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Human-readable dump: collection stats, one `doc` line per document
    /// and one `term` line per term with its `doc:tf` postings.
    pub fn dump_text(&self) -> String {
        let mut out = format!(
            "docs\t{}\tavgdl\t{}\tterms\t{}\n",
            self.num_docs(),
            self.avg_doc_len(),
            self.terms.len()
        );
        for (i, (docno, len)) in self.docnos.iter().zip(&self.doc_lengths).enumerate() {
            out.push_str(&format!("doc\t{i}\t{docno}\t{len}\n"));
        }
        for (term, entry) in &self.terms {
            let postings: Vec<String> = entry
                .postings
                .iter()
                .map(|p| format!("{}:{}", p.doc, p.tf))
                .collect();
            out.push_str(&format!(
                "term\t{term}\t{}\t{}\t{}\n",
                entry.collection_tf,
                entry.postings.len(),
                postings.join(",")
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_index, Analyzer, Passage};
    use super::*;

    fn sample() -> InvertedIndex {
        let passages = vec![
            Passage::new("MARCO_1", "Throat cancer is treatable when found early."),
            Passage::new("CAR_2", "Lung cancer can spread to the throat."),
            Passage::new("WAPO_3", "the of"),
        ];
        build_index(&passages, &Analyzer::default()).unwrap()
    }

    #[test]
    fn round_trip() {
        let index = sample();
        let bytes = index.to_bytes();
        assert_eq!(&bytes[..4], b"CRIX");
        let back = InvertedIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, index);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(InvertedIndex::read_from(&mut bad_magic.as_slice()), Err(IndexError::Corrupt(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(InvertedIndex::read_from(&mut &cut[..]), Err(IndexError::Corrupt(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(InvertedIndex::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn text_dump_lists_terms() {
        let dump = sample().dump_text();
        assert!(dump.starts_with("docs\t3\t"));
        assert!(dump.contains("term\tcancer\t2\t2\t0:1,1:1\n"));
    }
}
