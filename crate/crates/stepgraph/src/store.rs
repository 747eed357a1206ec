//! Knowledge hypergraph: entities, n-ary fact hyperedges and incidence indexes.
//!
//! The graph is immutable after build. All retrieval-side scoring divides by
//! per-entity incidence counts, so entities that would end up in no hyperedge
//! are never stored.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no valid fact records in input ({rejected} rejected)")]
    EmptyIngest { rejected: usize },
    #[error("unknown entity id {0}")]
    UnknownEntity(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index cache corrupt: {0}")]
    CorruptCache(String),
}

/// Case-folds and collapses whitespace; the entity identity key.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperedge {
    pub id: usize,
    pub text: String,
    pub entity_ids: Vec<usize>,
    pub source_doc: Option<String>,
}

/// One line of the ingestion JSONL format. Unknown fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_id: Option<serde_json::Value>,
    pub text: String,
    pub entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_doc: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    /// (1-based line number, reason)
    pub rejected: Vec<(usize, String)>,
    pub duplicates_collapsed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub duplicates_collapsed: usize,
    pub orphan_entities_dropped: usize,
    pub incidence_consistent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeHypergraph {
    entities: Vec<Entity>,
    hyperedges: Vec<Hyperedge>,
    /// entity id -> sorted hyperedge ids
    incidence: Vec<Vec<usize>>,
    #[serde(skip)]
    name_index: HashMap<String, usize>,
    duplicates_collapsed: usize,
}

impl KnowledgeHypergraph {
    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn hyperedges(&self) -> &[Hyperedge] {
        &self.hyperedges
    }

    pub fn entity(&self, id: usize) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn edge(&self, id: usize) -> Option<&Hyperedge> {
        self.hyperedges.get(id)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn degree(&self, entity_id: usize) -> usize {
        self.incidence.get(entity_id).map_or(0, Vec::len)
    }

    pub fn incident_edges(&self, entity_id: usize) -> &[usize] {
        self.incidence.get(entity_id).map_or(&[], Vec::as_slice)
    }

    /// Looks up an entity by surface string (case-folded).
    pub fn lookup_entity(&self, name: &str) -> Option<usize> {
        self.name_index.get(&normalize_name(name)).copied()
    }

    /// Union of incidence lists over the given entities (E_q for a query).
    pub fn edges_containing(&self, entity_ids: &[usize]) -> Result<BTreeSet<usize>, StoreError> {
        let mut out = BTreeSet::new();
        for &id in entity_ids {
            if id >= self.entities.len() {
                return Err(StoreError::UnknownEntity(id));
            }
            out.extend(self.incidence[id].iter().copied());
        }
        Ok(out)
    }

    /// Report-only consistency check: incidence must be the exact transpose
    /// of hyperedge membership and every entity must have degree >= 1.
    pub fn validate(&self) -> ValidationReport {
        let rebuilt = build_incidence(self.entities.len(), &self.hyperedges);
        let incidence_consistent = rebuilt == self.incidence;
        let orphans = self.incidence.iter().filter(|l| l.is_empty()).count();
        ValidationReport {
            ok: incidence_consistent && orphans == 0,
            duplicates_collapsed: self.duplicates_collapsed,
            orphan_entities_dropped: 0,
            incidence_consistent,
        }
    }

    /// Serializes every hyperedge back into the ingestion JSONL format.
    pub fn to_fact_records(&self) -> Vec<FactRecord> {
        self.hyperedges
            .iter()
            .map(|e| FactRecord {
                edge_id: Some(serde_json::Value::from(e.id)),
                text: e.text.clone(),
                entities: e
                    .entity_ids
                    .iter()
                    .map(|&v| self.entities[v].name.clone())
                    .collect(),
                source_doc: e.source_doc.clone(),
            })
            .collect()
    }

    fn rebuild_name_index(&mut self) {
        self.name_index.clear();
        for e in &self.entities {
            self.name_index.insert(normalize_name(&e.name), e.id);
            for a in &e.aliases {
                self.name_index.entry(normalize_name(a)).or_insert(e.id);
            }
        }
    }

    /// Test hook: corrupts the incidence index in place.
    #[doc(hidden)]
    pub fn corrupt_incidence_for_test(&mut self) {
        if let Some(list) = self.incidence.first_mut() {
            list.push(usize::MAX);
        }
    }
}

fn build_incidence(n_entities: usize, edges: &[Hyperedge]) -> Vec<Vec<usize>> {
    let mut inc = vec![Vec::new(); n_entities];
    for e in edges {
        for &v in &e.entity_ids {
            inc[v].push(e.id);
        }
    }
    for l in &mut inc {
        l.sort_unstable();
        l.dedup();
    }
    inc
}

/// Builds a validated hypergraph from pre-extracted fact records.
///
/// Entity identity is case-folded exact string match; duplicate facts
/// (same normalized text and entity set) are collapsed; ids are dense in
/// first-seen order. Per-record errors are collected in the report and
/// ingestion continues; zero valid records is fatal.
pub fn ingest_facts<I>(records: I) -> Result<(KnowledgeHypergraph, IngestReport), StoreError>
where
    I: IntoIterator<Item = (usize, Result<FactRecord, String>)>,
{
    let mut report = IngestReport::default();
    let mut entities: Vec<Entity> = Vec::new();
    let mut name_to_id: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<Hyperedge> = Vec::new();
    let mut seen_facts: HashMap<(String, BTreeSet<usize>), ()> = HashMap::new();

    for (line_no, rec) in records {
        let rec = match rec {
            Ok(r) => r,
            Err(msg) => {
                report.rejected.push((line_no, msg));
                continue;
            }
        };
        if rec.text.trim().is_empty() {
            report.rejected.push((line_no, "empty fact text".into()));
            continue;
        }
        if rec.entities.is_empty() {
            report.rejected.push((line_no, "empty entity list".into()));
            continue;
        }
        let mut ids = Vec::with_capacity(rec.entities.len());
        let mut dup_in_edge = false;
        for name in &rec.entities {
            let key = normalize_name(name);
            if key.is_empty() {
                dup_in_edge = true;
                report
                    .rejected
                    .push((line_no, format!("blank entity name {name:?}")));
                break;
            }
            let id = *name_to_id.entry(key).or_insert_with(|| {
                let id = entities.len();
                entities.push(Entity {
                    id,
                    name: name.clone(),
                    aliases: Vec::new(),
                });
                id
            });
            if ids.contains(&id) {
                dup_in_edge = true;
                report.rejected.push((
                    line_no,
                    format!("duplicate entity {name:?} within one fact"),
                ));
                break;
            }
            ids.push(id);
        }
        if dup_in_edge {
            continue;
        }
        let fact_key = (
            normalize_name(&rec.text),
            ids.iter().copied().collect::<BTreeSet<_>>(),
        );
        if seen_facts.insert(fact_key, ()).is_some() {
            report.duplicates_collapsed += 1;
            continue;
        }
        edges.push(Hyperedge {
            id: edges.len(),
            text: rec.text,
            entity_ids: ids,
            source_doc: rec.source_doc,
        });
        report.accepted += 1;
    }

    if edges.is_empty() {
        return Err(StoreError::EmptyIngest {
            rejected: report.rejected.len(),
        });
    }

    // Entities introduced only by rejected or collapsed records would be
    // orphans; re-densify over entities actually referenced by edges.
    let mut used = vec![false; entities.len()];
    for e in &edges {
        for &v in &e.entity_ids {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; entities.len()];
    let mut kept: Vec<Entity> = Vec::new();
    for (old_id, u) in used.iter().enumerate() {
        if *u {
            remap[old_id] = kept.len();
            let mut ent = entities[old_id].clone();
            ent.id = kept.len();
            kept.push(ent);
        }
    }
    for e in &mut edges {
        for v in &mut e.entity_ids {
            *v = remap[*v];
        }
    }

    let incidence = build_incidence(kept.len(), &edges);
    let mut graph = KnowledgeHypergraph {
        entities: kept,
        hyperedges: edges,
        incidence,
        name_index: HashMap::new(),
        duplicates_collapsed: report.duplicates_collapsed,
    };
    graph.rebuild_name_index();
    Ok((graph, report))
}

/// Ingests the line-delimited JSON fact format.
pub fn ingest_jsonl<R: BufRead>(reader: R) -> Result<(KnowledgeHypergraph, IngestReport), StoreError> {
    let mut parsed = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str::<FactRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"));
        parsed.push((i + 1, rec));
    }
    ingest_facts(parsed)
}

/// Rebuilds the cached name index after deserialization.
pub fn finish_deserialized(graph: &mut KnowledgeHypergraph) {
    graph.rebuild_name_index();
}

// ---------------------------------------------------------------------------
// Index persistence: JSONL is the source of truth, the binary incidence cache
// is an optimization keyed to the JSONL content hash.
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"SGI1";

/// Writes the compact binary incidence cache for a graph built from `jsonl_hash`.
pub fn write_incidence_cache(
    graph: &KnowledgeHypergraph,
    jsonl_hash: u64,
    w: &mut impl std::io::Write,
) -> Result<(), StoreError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&jsonl_hash.to_le_bytes())?;
    w.write_all(&(graph.entities.len() as u64).to_le_bytes())?;
    for list in &graph.incidence {
        w.write_all(&(list.len() as u64).to_le_bytes())?;
        for &e in list {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the incidence cache; `None` on version or hash mismatch (caller
/// rebuilds from JSONL).
pub fn read_incidence_cache(
    jsonl_hash: u64,
    r: &mut impl std::io::Read,
) -> Result<Option<Vec<Vec<usize>>>, StoreError> {
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != CACHE_MAGIC {
        return Ok(None);
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    if u64::from_le_bytes(u64buf) != jsonl_hash {
        return Ok(None);
    }
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let mut inc = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf)?;
            list.push(u64::from_le_bytes(u64buf) as usize);
        }
        inc.push(list);
    }
    Ok(Some(inc))
}
