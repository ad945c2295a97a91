use super::{Corpus, CorpusHeader, Dialogue};
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde_json::error::Category;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const CORPUS_FORMAT: &str = "derc-corpus";
pub const CORPUS_VERSION: u32 = 1;

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        f(&mut w)?;
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Serializes a corpus as JSON lines: the header record, then one dialogue
/// per line.
pub fn write_corpus(w: &mut dyn Write, corpus: &Corpus) -> io::Result<()> {
    serde_json::to_writer(&mut *w, &corpus.header)?;
    w.write_all(b"\n")?;
    for d in &corpus.dialogues {
        serde_json::to_writer(&mut *w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    corpus.validate()?;
    if is_gzip(path) {
        write_atomic(path, |w| {
            let mut gz = GzEncoder::new(w, Compression::default());
            write_corpus(&mut gz, corpus)?;
            gz.finish()?;
            Ok(())
        })
    } else {
        write_atomic(path, |w| write_corpus(w, corpus))
    }
}

fn json_error(line: usize, e: serde_json::Error) -> Error {
    let message = format!("{e}");
    match e.classify() {
        Category::Data => Error::Schema { line, message },
        Category::Io => Error::Io(e.into()),
        Category::Syntax | Category::Eof => Error::Parse { line, message },
    }
}

/// Parses and validates a corpus from JSON lines.
pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut header: Option<CorpusHeader> = None;
    let mut dialogues = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match header {
            None => header = Some(serde_json::from_str(&line).map_err(|e| json_error(line_no, e))?),
            Some(_) => {
                let d: Dialogue = serde_json::from_str(&line).map_err(|e| json_error(line_no, e))?;
                dialogues.push(d);
                lines_of.push(line_no);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Schema { line: 1, message: "missing header record".into() })?;
    let corpus = Corpus { header, dialogues };
    corpus.validate_with_lines(|i| lines_of[i])?;
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let reader: Box<dyn Read> = if is_gzip(path) { Box::new(GzDecoder::new(file)) } else { Box::new(file) };
    parse_corpus(BufReader::new(reader))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorConfig};

    fn ten() -> Corpus {
        generate(&GeneratorConfig {
            train_dialogues: 7,
            dev_dialogues: 1,
            test_dialogues: 2,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn to_text(c: &Corpus) -> String {
        let mut buf = Vec::new();
        write_corpus(&mut buf, c).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_corpus_is_just_a_header() {
        let c = Corpus { header: CorpusHeader::new(5, 32, 3), dialogues: vec![] };
        let text = to_text(&c);
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"format\":\"derc-corpus\""));
        assert_eq!(parse_corpus(text.as_bytes()).unwrap(), c);
    }

    #[test]
    fn generated_corpus_round_trips() {
        let c = ten();
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.jsonl", "c.jsonl.gz"] {
            let path = dir.path().join(name);
            save_corpus(&path, &c).unwrap();
            let back = load_corpus(&path).unwrap();
            assert_eq!(back, c);
            for (a, b) in
                back.dialogues.iter().flat_map(|d| &d.utterances).zip(c.dialogues.iter().flat_map(|d| &d.utterances))
            {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.audio), bits(&b.audio));
                assert_eq!(
                    bits(a.true_distribution.as_ref().unwrap().probs()),
                    bits(b.true_distribution.as_ref().unwrap().probs())
                );
            }
        }
        assert!(std::fs::read_dir(dir.path()).unwrap().count() == 2, "no temporary files left behind");
    }

    #[test]
    fn unknown_fields_survive() {
        let c = ten();
        let text = to_text(&c);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[0] = lines[0].replacen('{', "{\"source\":\"lab\",", 1);
        lines[1] = lines[1].replacen("\"speaker\"", "\"gender\":\"f\",\"speaker\"", 1);
        lines[2] = lines[2].replacen('{', "{\"session\":{\"n\":3},", 1);
        let edited = lines.join("\n") + "\n";
        let parsed = parse_corpus(edited.as_bytes()).unwrap();
        assert_eq!(parsed.header.extra["source"], "lab");
        assert_eq!(parsed.dialogues[0].utterances[0].extra["gender"], "f");
        assert_eq!(parsed.dialogues[1].extra["session"]["n"], 3);
        let again = parse_corpus(to_text(&parsed).as_bytes()).unwrap();
        assert_eq!(again, parsed);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = to_text(&ten());
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "{\"id\": \"broken\", ";
        let err = parse_corpus(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let text = to_text(&ten());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut d: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        d["utterances"][0].as_object_mut().unwrap().remove("audio");
        lines[2] = d.to_string();
        let err = parse_corpus(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("audio"), "{err}");
    }

    #[test]
    fn unnormalized_truth_is_rejected() {
        let text = to_text(&ten());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut d: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        d["utterances"][0]["true_distribution"] = serde_json::json!([0.5, 0.2, 0.1, 0.1, 0.08]);
        lines[1] = d.to_string();
        let err = parse_corpus(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("sum to 1"), "{err}");
    }

    #[test]
    fn inconsistent_soft_label_is_rejected() {
        let text = to_text(&ten());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut d: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        let labels = d["utterances"][0]["labels"].as_array().unwrap().clone();
        let first = labels[0].as_u64().unwrap();
        d["utterances"][0]["labels"] = serde_json::json!([first, first, first]);
        d["utterances"][0]["majority"] = serde_json::json!(first);
        lines[1] = d.to_string();
        let was_unanimous = labels.iter().all(|l| l.as_u64() == Some(first));
        let res = parse_corpus(lines.join("\n").as_bytes());
        if was_unanimous {
            res.unwrap();
        } else {
            let err = res.unwrap_err();
            assert!(err.to_string().contains("soft_label"), "{err}");
        }
    }
}
