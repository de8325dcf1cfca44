//! Bundle directory layout:
//!
//! ```text
//! tcm.graph.txt  wm.graph.txt   side header, `E` entity lines, `L` edge lines
//! anchors.tsv                   <tcm_id>\t<wm_id>
//! compat.tsv                    <tcm_type>\t<wm_type>
//! queries.tsv                   <instance_id>\t<entity_id>\t<direction>\t<description>
//! query_targets.tsv             <instance_id>\t<target_id>   (optional)
//! splits.tsv                    <tcm_id>\t<wm_id>\t<train|val|test>
//! query.emb  tcm.emb  wm.emb    binary tables (or *.emb.txt text tables)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DatasetBundle, EmbeddingTable, QueryId, QueryInstance, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::graph::{AnchorSet, CompatTable, Direction, Entity, EntityId, Graph, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Text,
}

/// The set of files a bundle is read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleFiles {
    pub tcm_graph: PathBuf,
    pub wm_graph: PathBuf,
    pub anchors: PathBuf,
    pub compat: PathBuf,
    pub queries: PathBuf,
    pub query_targets: Option<PathBuf>,
    pub splits: PathBuf,
    pub query_emb: PathBuf,
    pub tcm_emb: PathBuf,
    pub wm_emb: PathBuf,
}

impl BundleFiles {
    /// Locate the standard file names inside `dir`, preferring binary
    /// embedding tables over text ones.
    pub fn in_dir(dir: &Path) -> BundleFiles {
        let emb = |stem: &str| {
            let bin = dir.join(format!("{stem}.emb"));
            if bin.exists() {
                bin
            } else {
                dir.join(format!("{stem}.emb.txt"))
            }
        };
        let targets = dir.join("query_targets.tsv");
        BundleFiles {
            tcm_graph: dir.join("tcm.graph.txt"),
            wm_graph: dir.join("wm.graph.txt"),
            anchors: dir.join("anchors.tsv"),
            compat: dir.join("compat.tsv"),
            queries: dir.join("queries.tsv"),
            query_targets: targets.exists().then_some(targets),
            splits: dir.join("splits.tsv"),
            query_emb: emb("query"),
            tcm_emb: emb("tcm"),
            wm_emb: emb("wm"),
        }
    }

    pub fn all(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![
            &self.tcm_graph,
            &self.wm_graph,
            &self.anchors,
            &self.compat,
            &self.queries,
            &self.splits,
            &self.query_emb,
            &self.tcm_emb,
            &self.wm_emb,
        ];
        if let Some(p) = &self.query_targets {
            v.push(p);
        }
        v
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn content_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_id(file: &str, line: usize, s: &str) -> Result<u32> {
    s.trim().parse::<u32>().map_err(|e| Error::parse(file, line, format!("bad id {s:?}: {e}")))
}

fn tab_fields<'a>(file: &str, line: usize, text: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = text.splitn(n, '\t').collect();
    if fields.len() != n {
        return Err(Error::parse(file, line, format!("expected {n} tab-separated fields")));
    }
    Ok(fields)
}

pub(crate) fn read_graph(path: &Path) -> Result<Graph> {
    let file = label(path);
    let lines = content_lines(path)?;
    let Some((first_no, header)) = lines.first() else {
        return Err(Error::parse(&file, 0, "empty graph file"));
    };
    let side = header
        .strip_prefix("side ")
        .and_then(|s| Side::parse(s.trim()))
        .ok_or_else(|| Error::parse(&file, *first_no, "expected `side <TCM|WM>` header"))?;

    let mut entities = Vec::new();
    let mut edges = Vec::new();
    for (no, line) in &lines[1..] {
        if let Some(rest) = line.strip_prefix("E ") {
            let (head, description) =
                rest.split_once('\t').ok_or_else(|| Error::parse(&file, *no, "entity line needs a tab before the description"))?;
            let mut parts = head.splitn(3, ' ');
            let id = parse_id(&file, *no, parts.next().unwrap_or(""))?;
            let type_tag = parts.next().unwrap_or("").to_string();
            let name = parts.next().unwrap_or("").to_string();
            entities.push(Entity { id: EntityId(id), side, type_tag, name, description: description.to_string() });
        } else if let Some(rest) = line.strip_prefix("L ") {
            let mut parts = rest.split_whitespace();
            let a = parse_id(&file, *no, parts.next().unwrap_or(""))?;
            let b = parse_id(&file, *no, parts.next().unwrap_or(""))?;
            if parts.next().is_some() {
                return Err(Error::parse(&file, *no, "edge line has extra fields"));
            }
            edges.push((EntityId(a), EntityId(b)));
        } else {
            return Err(Error::parse(&file, *no, "expected an `E` or `L` line"));
        }
    }
    Graph::new(side, entities, edges)
}

fn read_pairs(path: &Path) -> Result<Vec<(EntityId, EntityId)>> {
    let file = label(path);
    content_lines(path)?
        .iter()
        .map(|(no, line)| {
            let f = tab_fields(&file, *no, line, 2)?;
            Ok((EntityId(parse_id(&file, *no, f[0])?), EntityId(parse_id(&file, *no, f[1])?)))
        })
        .collect()
}

fn read_compat(path: &Path) -> Result<CompatTable> {
    let file = label(path);
    let mut pairs = Vec::new();
    for (no, line) in content_lines(path)? {
        let f = tab_fields(&file, no, &line, 2)?;
        if f.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::parse(&file, no, "empty type tag"));
        }
        pairs.push((f[0].trim().to_string(), f[1].trim().to_string()));
    }
    Ok(CompatTable::new(pairs))
}

fn read_queries(path: &Path, targets: Option<&Path>) -> Result<Vec<QueryInstance>> {
    let file = label(path);
    let mut context: BTreeMap<QueryId, BTreeSet<EntityId>> = BTreeMap::new();
    if let Some(tp) = targets {
        for (q, t) in read_pairs(tp)? {
            context.entry(QueryId(q.0)).or_default().insert(t);
        }
    }
    let mut out = Vec::new();
    for (no, line) in content_lines(path)? {
        let f = tab_fields(&file, no, &line, 4)?;
        let id = QueryId(parse_id(&file, no, f[0])?);
        let entity = EntityId(parse_id(&file, no, f[1])?);
        let direction = f[2]
            .trim()
            .parse::<usize>()
            .ok()
            .and_then(Direction::from_bit)
            .ok_or_else(|| Error::parse(&file, no, "direction must be 0 or 1"))?;
        out.push(QueryInstance {
            id,
            entity,
            direction,
            description: f[3].to_string(),
            context_targets: context.remove(&id),
        });
    }
    if let Some((q, _)) = context.into_iter().next() {
        return Err(Error::parse("query_targets.tsv", 0, format!("unknown query instance {q}")));
    }
    Ok(out)
}

fn read_splits(path: &Path) -> Result<SplitAssignment> {
    let file = label(path);
    let mut labels = BTreeMap::new();
    for (no, line) in content_lines(path)? {
        let f = tab_fields(&file, no, &line, 3)?;
        let pair = (EntityId(parse_id(&file, no, f[0])?), EntityId(parse_id(&file, no, f[1])?));
        let split = Split::parse(f[2].trim()).ok_or_else(|| Error::parse(&file, no, "split must be train, val or test"))?;
        if labels.insert(pair, split).is_some() {
            return Err(Error::parse(&file, no, "duplicate pair"));
        }
    }
    Ok(SplitAssignment::from_labels(labels))
}

fn read_embeddings(path: &Path, name: &str) -> Result<EmbeddingTable> {
    let text = path.to_string_lossy().ends_with(".txt");
    let reader = open(path)?;
    if text {
        EmbeddingTable::read_text(name, reader)
    } else {
        EmbeddingTable::read_binary(name, reader)
    }
}

/// Read and fully validate a bundle.
pub fn load_bundle(files: &BundleFiles) -> Result<DatasetBundle> {
    let tcm = read_graph(&files.tcm_graph)?;
    let wm = read_graph(&files.wm_graph)?;
    if tcm.side() != Side::Tcm || wm.side() != Side::Wm {
        return Err(Error::InvalidArgument("graph file side headers do not match their roles".into()));
    }
    let anchors = AnchorSet::new(read_pairs(&files.anchors)?)?;
    let compat = read_compat(&files.compat)?;
    let queries = read_queries(&files.queries, files.query_targets.as_deref())?;
    let splits = read_splits(&files.splits)?;
    let query_emb = read_embeddings(&files.query_emb, "query")?;
    let tcm_emb = read_embeddings(&files.tcm_emb, "tcm")?;
    let wm_emb = read_embeddings(&files.wm_emb, "wm")?;
    DatasetBundle::new(tcm, wm, anchors, compat, queries, query_emb, tcm_emb, wm_emb, splits)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_graph(path: &Path, g: &Graph) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "side {}", g.side()).map_err(io)?;
    for e in g.entities() {
        writeln!(w, "E {} {} {}\t{}", e.id, e.type_tag, e.name, e.description).map_err(io)?;
    }
    for (a, b) in g.edges() {
        writeln!(w, "L {a} {b}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write a bundle directory. Output bytes depend only on bundle content.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path, format: EmbeddingFormat) -> Result<BundleFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for side in Side::BOTH {
        for e in bundle.graph(side).entities() {
            if e.type_tag.contains(char::is_whitespace) || e.name.contains(['\t', '\n']) || e.description.contains(['\t', '\n']) {
                return Err(Error::InvalidArgument(format!("{side} entity {} cannot be written losslessly", e.id)));
            }
        }
    }
    write_graph(&dir.join("tcm.graph.txt"), bundle.graph(Side::Tcm))?;
    write_graph(&dir.join("wm.graph.txt"), bundle.graph(Side::Wm))?;

    let write_lines = |name: &str, lines: Vec<String>| -> Result<()> {
        let path = dir.join(name);
        let mut w = create(&path)?;
        for l in lines {
            writeln!(w, "{l}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    };
    write_lines("anchors.tsv", bundle.anchors().pairs().iter().map(|(t, w)| format!("{t}\t{w}")).collect())?;
    write_lines("compat.tsv", bundle.compat().pairs().map(|(t, w)| format!("{t}\t{w}")).collect())?;
    write_lines(
        "queries.tsv",
        bundle
            .queries()
            .iter()
            .map(|q| format!("{}\t{}\t{}\t{}", q.id, q.entity, q.direction.bit(), q.description))
            .collect(),
    )?;
    let targets: Vec<String> = bundle
        .queries()
        .iter()
        .flat_map(|q| q.context_targets.iter().flatten().map(move |t| format!("{}\t{t}", q.id)))
        .collect();
    let targets_path = dir.join("query_targets.tsv");
    if targets.is_empty() {
        if targets_path.exists() {
            fs::remove_file(&targets_path).map_err(|e| Error::io(&targets_path, e))?;
        }
    } else {
        write_lines("query_targets.tsv", targets)?;
    }
    write_lines("splits.tsv", bundle.splits().iter().map(|((t, w), s)| format!("{t}\t{w}\t{s}")).collect())?;

    for (stem, table) in [
        ("query", bundle.query_embeddings()),
        ("tcm", bundle.embeddings(Side::Tcm)),
        ("wm", bundle.embeddings(Side::Wm)),
    ] {
        let (keep, drop) = match format {
            EmbeddingFormat::Binary => (format!("{stem}.emb"), format!("{stem}.emb.txt")),
            EmbeddingFormat::Text => (format!("{stem}.emb.txt"), format!("{stem}.emb")),
        };
        let stale = dir.join(drop);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        let path = dir.join(keep);
        let mut w = create(&path)?;
        match format {
            EmbeddingFormat::Binary => table.write_binary(&mut w),
            EmbeddingFormat::Text => table.write_text(&mut w),
        }
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    }
    Ok(BundleFiles::in_dir(dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    /// Two entities per side, one anchor.
    fn minimal_fixture(dir: &Path, skip_wm_row: bool) {
        write(dir, "tcm.graph.txt", "side TCM\nE 0 symptom cough heat\tcough heat: cough with fever\nE 1 symptom dry mouth\tdry mouth: thirst\nL 0 1\n");
        write(dir, "wm.graph.txt", "side WM\nE 7 symptom cough\tcough: expulsion of air\nE 8 symptom fever\tfever: raised temperature\n");
        write(dir, "anchors.tsv", "0\t7\n");
        write(dir, "compat.tsv", "symptom\tsymptom\n");
        write(dir, "queries.tsv", "0\t0\t0\tcough heat: cough with fever\n1\t7\t1\tcough: expulsion of air\n");
        write(dir, "splits.tsv", "0\t7\ttrain\n");
        write(dir, "query.emb.txt", "dim 3\n0 1 0 0\n1 0 1 0\n");
        write(dir, "tcm.emb.txt", "dim 2\n0 1 0\n1 0 1\n");
        let wm = if skip_wm_row { "dim 4\n7 1 0 0 0\n" } else { "dim 4\n7 1 0 0 0\n8 0 1 0 0\n" };
        write(dir, "wm.emb.txt", wm);
    }

    #[test]
    fn minimal_fixture_loads() {
        let tmp = tempfile::tempdir().unwrap();
        minimal_fixture(tmp.path(), false);
        let b = load_bundle(&BundleFiles::in_dir(tmp.path())).unwrap();
        assert_eq!(b.anchors().len(), 1);
        assert_eq!(b.dims(), (3, 2, 4));
        assert_eq!(b.graph(Side::Tcm).entity(EntityId(0)).unwrap().name, "cough heat");
        assert_eq!(b.queries().len(), 2);
    }

    #[test]
    fn missing_row_names_the_id() {
        let tmp = tempfile::tempdir().unwrap();
        minimal_fixture(tmp.path(), true);
        let err = load_bundle(&BundleFiles::in_dir(tmp.path())).unwrap_err();
        assert!(matches!(err, Error::MissingEmbeddingRow { id: 8, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_and_unknown_id_are_distinct() {
        let tmp = tempfile::tempdir().unwrap();
        minimal_fixture(tmp.path(), false);
        write(tmp.path(), "tcm.emb.txt", "dim 2\n0 1 0\n1 0 1 5\n");
        let err = load_bundle(&BundleFiles::in_dir(tmp.path())).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }), "{err}");

        minimal_fixture(tmp.path(), false);
        write(tmp.path(), "anchors.tsv", "0\t9\n");
        write(tmp.path(), "splits.tsv", "0\t9\ttrain\n");
        let err = load_bundle(&BundleFiles::in_dir(tmp.path())).unwrap_err();
        assert!(matches!(err, Error::UnknownEntity { id: EntityId(9), .. }), "{err}");
    }

    #[test]
    fn save_load_round_trip_both_formats() {
        let tmp = tempfile::tempdir().unwrap();
        minimal_fixture(tmp.path(), false);
        let b = load_bundle(&BundleFiles::in_dir(tmp.path())).unwrap();
        for fmt in [EmbeddingFormat::Binary, EmbeddingFormat::Text] {
            let out = tempfile::tempdir().unwrap();
            let files = save_bundle(&b, out.path(), fmt).unwrap();
            assert_eq!(load_bundle(&files).unwrap(), b);
        }
    }
}
