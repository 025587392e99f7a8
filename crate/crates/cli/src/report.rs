use std::path::Path;

use anyhow::{Context, Result};

const SECTIONS: [(&str, &str); 3] = [("eval", "Evaluations"), ("ablations", "Ablations"), ("sweeps", "Noise sweeps")];

/// Markdown summary of every CSV under `eval/`, `ablations/` and `sweeps/`,
/// in file-name order. Depends only on the CSV contents.
pub fn build(out: &Path) -> Result<String> {
    let mut md = String::from("# Results\n");
    for (dir, title) in SECTIONS {
        let mut files: Vec<_> = match std::fs::read_dir(out.join(dir)) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect(),
            Err(_) => Vec::new(),
        };
        if files.is_empty() {
            continue;
        }
        files.sort();
        md.push_str(&format!("\n## {title}\n"));
        for f in files {
            let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            md.push_str(&format!("\n### {name}\n\n"));
            md.push_str(&table(&text));
        }
    }
    Ok(md)
}

fn cell(v: &str) -> String {
    match v.parse::<f64>() {
        Ok(x) if v.contains('e') || v.contains('.') => format!("{x:.4}"),
        _ => v.to_string(),
    }
}

fn table(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return "(empty)\n".into();
    };
    let cols = header.split(',').count();
    let mut s = format!(
        "| {} |\n|{}\n",
        header.split(',').collect::<Vec<_>>().join(" | "),
        "---|".repeat(cols)
    );
    let mut rows = 0;
    for l in lines {
        s.push_str(&format!("| {} |\n", l.split(',').map(cell).collect::<Vec<_>>().join(" | ")));
        rows += 1;
    }
    if rows == 0 {
        s.push_str("\n(no rows)\n");
    }
    s
}
