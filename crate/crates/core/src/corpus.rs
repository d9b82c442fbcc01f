//! Document store built from plain text.
//!
//! Input format: one sentence per line, documents separated by one or more
//! blank lines. Sentence order and document boundaries are preserved exactly
//! because the sampler's adjacency labels are defined over them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const STORE_FORMAT_VERSION: u32 = 1;
const STORE_TEXT: &str = "corpus.txt";
const STORE_HEADER: &str = "header.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub sentences: Vec<String>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Immutable, ordered collection of documents.
///
/// Document ids are dense (`0..len`), so the id doubles as the offset into
/// `documents`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStore {
    documents: Vec<Document>,
    sentence_count: usize,
}

impl CorpusStore {
    /// Builds a store from already-split documents, assigning ids in order.
    /// Empty documents are dropped.
    pub fn from_documents(docs: Vec<Vec<String>>) -> Result<Self> {
        let documents: Vec<Document> = docs
            .into_iter()
            .filter(|d| !d.is_empty())
            .enumerate()
            .map(|(id, sentences)| Document { id, sentences })
            .collect();
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let sentence_count = documents.iter().map(Document::len).sum();
        Ok(Self {
            documents,
            sentence_count,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, id: usize) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_count
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.documents
            .iter()
            .flat_map(|d| d.sentences.iter().map(String::as_str))
    }

    /// Canonical text form: sentences one per line, a single blank line
    /// between documents, trailing newline.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for s in &doc.sentences {
                out.push_str(s);
                out.push('\n');
            }
        }
        out
    }

    /// Writes `<dir>/corpus.txt` and `<dir>/header.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text_path = dir.join(STORE_TEXT);
        fs::write(&text_path, self.to_text()).map_err(|e| Error::io(&text_path, e))?;
        let mut header = String::new();
        let _ = writeln!(header, "version={STORE_FORMAT_VERSION}");
        let _ = writeln!(header, "documents={}", self.len());
        let _ = writeln!(header, "sentences={}", self.sentence_count);
        let header_path = dir.join(STORE_HEADER);
        fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))
    }

    /// Loads a store written by [`CorpusStore::save`], checking the header
    /// counts against the text.
    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(STORE_HEADER);
        let header = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let mut version = None;
        let mut documents = None;
        let mut sentences = None;
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("store header", format!("bad line {line:?}")))?;
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::format("store header", format!("bad value in {line:?}")))?;
            match k.trim() {
                "version" => version = Some(n),
                "documents" => documents = Some(n),
                "sentences" => sentences = Some(n),
                other => return Err(Error::format("store header", format!("unknown key {other}"))),
            }
        }
        if version != Some(STORE_FORMAT_VERSION as usize) {
            return Err(Error::format("store header", format!("unsupported version {version:?}")));
        }
        let store = ingest(&[dir.join(STORE_TEXT)])?;
        if Some(store.len()) != documents || Some(store.sentence_count()) != sentences {
            return Err(Error::format(
                "store",
                format!(
                    "header counts {documents:?}/{sentences:?} disagree with text {}/{}",
                    store.len(),
                    store.sentence_count()
                ),
            ));
        }
        Ok(store)
    }
}

/// Splits text into documents. Lines are right-trimmed (which also removes
/// the `\r` of CRLF endings); whitespace-only lines separate documents.
pub fn parse_documents(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.split('\n') {
        let line = line.trim_end();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

fn read_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    Ok(parse_documents(text))
}

/// Reads the files (concurrently) and concatenates their documents in the
/// given file order. The result is identical to sequential reading.
pub fn ingest<P: AsRef<Path> + Sync>(files: &[P]) -> Result<CorpusStore> {
    let per_file: Vec<Result<Vec<Vec<String>>>> =
        files.par_iter().map(|p| read_file(p.as_ref())).collect();
    let mut docs = Vec::new();
    for r in per_file {
        docs.extend(r?);
    }
    CorpusStore::from_documents(docs)
}

/// Keeps documents with at least `min_sentences` sentences, renumbering ids.
pub fn filter_short_documents(store: &CorpusStore, min_sentences: usize) -> Result<CorpusStore> {
    if min_sentences == 0 {
        return Err(Error::invalid("min_sentences must be >= 1"));
    }
    let kept: Vec<Vec<String>> = store
        .documents
        .iter()
        .filter(|d| d.len() >= min_sentences)
        .map(|d| d.sentences.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::NoUsableDocuments);
    }
    CorpusStore::from_documents(kept)
}

/// Expands shell-style patterns in order; each pattern's matches are sorted.
/// A pattern with no glob metacharacters is passed through untouched so a
/// missing file still surfaces as an IO error naming it.
pub fn expand_inputs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pat in patterns {
        if pat.contains(['*', '?', '[']) {
            let mut matched: Vec<PathBuf> = glob::glob(pat)
                .map_err(|e| Error::invalid(format!("bad input pattern {pat}: {e}")))?
                .filter_map(|p| p.ok())
                .collect();
            if matched.is_empty() {
                return Err(Error::invalid(format!("input pattern {pat} matched no files")));
            }
            matched.sort();
            out.extend(matched);
        } else {
            out.push(PathBuf::from(pat));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, content: &[u8]) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(content).unwrap();
        p
    }

    fn sizes(store: &CorpusStore) -> Vec<usize> {
        store.documents().iter().map(Document::len).collect()
    }

    fn store_of(sizes: &[usize]) -> CorpusStore {
        CorpusStore::from_documents(
            sizes
                .iter()
                .enumerate()
                .map(|(d, &n)| (0..n).map(|i| format!("d{d} s{i}")).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn blank_line_splits_documents() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", b"s1\ns2\n\nt1\n");
        let store = ingest(&[p]).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.documents()[0].sentences, vec!["s1", "s2"]);
        assert_eq!(store.documents()[1].sentences, vec!["t1"]);
    }

    #[test]
    fn single_sentence() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", b"s1");
        let store = ingest(&[p]).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.sentence_count(), 1);
    }

    #[test]
    fn two_files_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.txt", b"a0\na1\n\n\na2\n");
        let b = write(dir.path(), "b.txt", b"b0\n\nb1\nb1x\n\nb2\n");
        let store = ingest(&[a, b]).unwrap();
        let ids: Vec<usize> = store.documents().iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let firsts: Vec<&str> = store.documents().iter().map(|d| d.sentences[0].as_str()).collect();
        assert_eq!(firsts, vec!["a0", "a2", "b0", "b1", "b2"]);
        assert_eq!(store.sentence_count(), 7);
    }

    #[test]
    fn crlf_and_whitespace_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.txt", b"x y  \r\nz\r\n \t\r\nw\r\n");
        let store = ingest(&[p]).unwrap();
        assert_eq!(store.documents()[0].sentences, vec!["x y", "z"]);
        assert_eq!(store.documents()[1].sentences, vec!["w"]);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.txt");
        let err = ingest(&[&missing]).unwrap_err();
        assert!(err.to_string().contains("nope.txt"), "{err}");

        let bad = write(dir.path(), "bad.txt", b"ok\n\xff\xfe");
        match ingest(&[bad]).unwrap_err() {
            Error::InvalidUtf8 { offset, .. } => assert_eq!(offset, 3),
            e => panic!("unexpected {e}"),
        }

        let empty = write(dir.path(), "empty.txt", b"\n\n  \n");
        assert!(matches!(ingest(&[empty]).unwrap_err(), Error::EmptyCorpus));
    }

    #[test]
    fn filter_short() {
        let filtered = filter_short_documents(&store_of(&[1, 2, 3, 5]), 3).unwrap();
        assert_eq!(sizes(&filtered), vec![3, 5]);
        assert_eq!(filtered.documents()[1].id, 1);
        assert_eq!(filtered.sentence_count(), 8);

        let same = filter_short_documents(&store_of(&[4]), 1).unwrap();
        assert_eq!(same, store_of(&[4]));

        let err = filter_short_documents(&store_of(&[2, 2]), 3).unwrap_err();
        assert_eq!(err.to_string(), "no usable documents");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_of(&[3, 1, 4]);
        store.save(dir.path()).unwrap();
        assert_eq!(CorpusStore::load(dir.path()).unwrap(), store);
    }
}
