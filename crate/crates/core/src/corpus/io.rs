use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CorpusError, InteractionRecord, Sequence, SplitDataset, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    /// Guesses from the file extension; anything but `.csv` is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Tsv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Tsv => b'\t',
            LogFormat::Csv => b',',
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

/// Reads a headerless `user, item, timestamp` log, preserving row order.
pub fn load_log(path: &Path, format: LogFormat) -> Result<Vec<InteractionRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(format.delimiter())
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let malformed = |line: u64, reason: String| CorpusError::Malformed { path: path.display().to_string(), line, reason };

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() != 3 {
            return Err(malformed(line, format!("expected 3 columns (user, item, timestamp), found {}", row.len())));
        }
        let timestamp: i64 = row[2]
            .parse()
            .map_err(|_| malformed(line, format!("timestamp {:?} is not an integer", &row[2])))?;
        if timestamp < 0 {
            return Err(malformed(line, format!("negative timestamp {timestamp}")));
        }
        out.push(InteractionRecord::new(&row[0], &row[1], timestamp));
    }
    Ok(out)
}

pub const PREPARED_FILES: [&str; 4] = ["items.tsv", "users.tsv", "sequences.tsv", "split_manifest.txt"];

/// Writes the vocabulary, the filtered sequences and the split manifest.
///
/// `items.tsv` / `users.tsv`: `<dense index>\t<id>`;
/// `sequences.tsv`: `<user index>\t<space-separated item indices>`;
/// `split_manifest.txt`: `<user id>\t<train length>\t<valid item id>\t<test item id>`
/// with `-` for train-only users.
pub fn write_prepared(dir: &Path, vocab: &Vocabulary, seqs: &[Sequence], split: &SplitDataset) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut items = String::new();
    for (i, id) in vocab.item_ids().iter().enumerate() {
        writeln!(items, "{}\t{id}", i + 1).unwrap();
    }
    let mut users = String::new();
    for (u, id) in vocab.user_ids().iter().enumerate() {
        writeln!(users, "{u}\t{id}").unwrap();
    }
    let mut sequences = String::new();
    for s in seqs {
        let items: Vec<String> = s.items.iter().map(usize::to_string).collect();
        writeln!(sequences, "{}\t{}", s.user, items.join(" ")).unwrap();
    }
    let mut manifest = String::new();
    for u in &split.users {
        let uid = vocab.user_id(u.user()).unwrap_or("?");
        let (valid, test) = match u.held_out {
            Some(h) => (vocab.item_id(h.valid).unwrap_or("?"), vocab.item_id(h.test).unwrap_or("?")),
            None => ("-", "-"),
        };
        writeln!(manifest, "{uid}\t{}\t{valid}\t{test}", u.train_len).unwrap();
    }
    for (name, body) in PREPARED_FILES.iter().zip([items, users, sequences, manifest]) {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

/// Loads what [`write_prepared`] wrote.
pub fn read_prepared(dir: &Path) -> Result<(Vocabulary, Vec<Sequence>), CorpusError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    };
    let malformed = |name: &str, line: usize, reason: &str| CorpusError::Malformed {
        path: dir.join(name).display().to_string(),
        line: line as u64 + 1,
        reason: reason.to_string(),
    };

    let id_column = |name: &str, first: usize| -> Result<Vec<String>, CorpusError> {
        let text = read(name)?;
        let mut ids = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let (idx, id) = line.split_once('\t').ok_or_else(|| malformed(name, no, "expected <index>\\t<id>"))?;
            if idx.parse::<usize>().ok() != Some(ids.len() + first) {
                return Err(malformed(name, no, "indices must be dense and ordered"));
            }
            ids.push(id.to_string());
        }
        Ok(ids)
    };
    let item_ids = id_column("items.tsv", 1)?;
    let user_ids = id_column("users.tsv", 0)?;

    let text = read("sequences.tsv")?;
    let mut seqs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let (u, items) = line.split_once('\t').ok_or_else(|| malformed("sequences.tsv", no, "expected <user>\\t<items>"))?;
        let user: usize = u.parse().map_err(|_| malformed("sequences.tsv", no, "bad user index"))?;
        let items = items
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| malformed("sequences.tsv", no, "bad item index"))?;
        if user >= user_ids.len() || items.iter().any(|&i| i == 0 || i > item_ids.len()) || items.is_empty() {
            return Err(malformed("sequences.tsv", no, "index out of range"));
        }
        seqs.push(Sequence { user, items });
    }
    if seqs.is_empty() {
        return Err(malformed("sequences.tsv", 0, "no sequences"));
    }
    Ok((Vocabulary::from_ids(user_ids, item_ids), seqs))
}
