use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use super::{Result, RetrievalError};

/// query id → (passage id → graded relevance).
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

fn dcg(rels: impl Iterator<Item = u32>) -> f64 {
    rels.take(10)
        .enumerate()
        .map(|(r, rel)| (2f64.powi(rel as i32) - 1.0) / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG@10 with gain `2^rel − 1`; the ideal ranking sorts all judged
/// relevances for the query.
pub fn ndcg_at_10(ranked_ids: &[String], rels: &BTreeMap<String, u32>) -> Result<f64> {
    if !rels.values().any(|&r| r > 0) {
        return Err(RetrievalError::NoPositives);
    }
    let got = dcg(ranked_ids.iter().map(|id| rels.get(id).copied().unwrap_or(0)));
    let mut ideal: Vec<u32> = rels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    Ok(got / dcg(ideal.into_iter()))
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// `query_id \t passage_id \t relevance` lines.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (n, line) in lines(path)? {
        let bad = |detail: &str| RetrievalError::Parse {
            file: path.display().to_string(),
            line: n,
            detail: detail.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [qid, pid, rel] = cols[..] else {
            return Err(bad("expected 3 tab-separated columns"));
        };
        let rel: u32 = rel.trim().parse().map_err(|_| bad("relevance is not a non-negative integer"))?;
        q.entry(qid.to_string()).or_default().insert(pid.to_string(), rel);
    }
    Ok(q)
}

/// `id \t text` lines, in file order.
pub fn read_id_text_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let Some((id, text)) = line.split_once('\t') else {
            return Err(RetrievalError::Parse {
                file: path.display().to_string(),
                line: n,
                detail: "expected `id<TAB>text`".into(),
            });
        };
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}
