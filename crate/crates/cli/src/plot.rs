use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use metatts::io::{read_to_string, write_atomic};
use metatts::metrics::{curve_text, MetricReport};
use metatts::Error;

use crate::commands::DirLock;

/// Pixels per matrix cell in rendered heat maps.
const CELL: usize = 12;

fn label(r: &MetricReport) -> String {
    format!("{}_{}", r.approach, r.mask).chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for p in paths {
        let r: MetricReport = serde_json::from_str(&read_to_string(p)?)
            .map_err(|e| Error::Parse { path: p.clone(), line: e.line(), msg: e.to_string() })?;
        out.push(r);
    }
    if let Some(first) = out.first() {
        if let Some((i, r)) = out.iter().enumerate().find(|(_, r)| r.manifest_hash != first.manifest_hash) {
            return Err(Error::Input(format!(
                "{} was evaluated on manifest {} but {} on {}; reports in one comparison must share a manifest",
                paths[i].display(),
                r.manifest_hash,
                paths[0].display(),
                first.manifest_hash
            ))
            .into());
        }
    }
    Ok(out)
}

pub fn matrix_text(speakers: &[u32], m: &[Vec<f64>]) -> String {
    let mut s = String::from("#");
    for id in speakers {
        let _ = write!(s, " {id}");
    }
    s.push('\n');
    for row in m {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Plain (P2) grayscale image of a similarity matrix; cosine −1 is black, 1 white.
pub fn matrix_pgm(m: &[Vec<f64>]) -> String {
    let n = m.len();
    let side = n * CELL;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for row in m {
        let px: Vec<String> = row
            .iter()
            .flat_map(|&v| {
                let g = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
                std::iter::repeat_n(g.to_string(), CELL)
            })
            .collect();
        let line = px.join(" ");
        for _ in 0..CELL {
            s.push_str(&line);
            s.push('\n');
        }
    }
    s
}

pub fn plot(paths: &[PathBuf], out: &Path, images: bool) -> Result<()> {
    let reports = load_reports(paths)?;
    let _lock = DirLock::acquire(out)?;
    let mut seen = BTreeSet::new();
    let mut trend = String::from("label\tmark\tn\tsimilarity_mean\tsimilarity_std\teer\troc_auc\tdiagonal_rate\tsupport_loss\n");
    for r in &reports {
        let mut name = label(r);
        let mut k = 2;
        while !seen.insert(name.clone()) {
            name = format!("{}_{k}", label(r));
            k += 1;
        }
        let dir = out.join(&name);
        for (mark, m) in &r.marks {
            write_atomic(&dir.join(format!("mark{mark:03}-det.txt")), curve_text(&m.det).as_bytes())?;
            write_atomic(&dir.join(format!("mark{mark:03}-roc.txt")), curve_text(&m.roc).as_bytes())?;
            write_atomic(&dir.join(format!("mark{mark:03}-matrix.txt")), matrix_text(&r.speakers, &m.similarity_matrix).as_bytes())?;
            if images {
                write_atomic(&dir.join(format!("mark{mark:03}-matrix.pgm")), matrix_pgm(&m.similarity_matrix).as_bytes())?;
            }
            let sl = m.support_loss.map(|l| format!("{l:?}")).unwrap_or_else(|| "nan".into());
            let _ = writeln!(
                trend,
                "{name}\t{mark}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{sl}",
                m.n_outputs, m.similarity_mean, m.similarity_std, m.eer, m.roc_auc, m.diagonal_rate
            );
        }
    }
    write_atomic(&out.join("trend.tsv"), trend.as_bytes())?;
    log::info!("wrote plots for {} reports to {}", reports.len(), out.display());
    Ok(())
}
