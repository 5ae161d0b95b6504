//! Entity and relation mentions, optional descriptions, and the exact
//! mention-to-entity index used to resolve decoder samples.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

#[derive(Clone, Debug)]
pub struct TextStore {
    entity_mentions: Vec<String>,
    relation_mentions: Vec<String>,
    descriptions: Vec<Option<String>>,
    mention_index: HashMap<String, Vec<EntityId>>,
}

/// Parses an `id<TAB>text` file into pairs.
pub fn read_id_text(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_id_text(&text, path)
}

pub fn parse_id_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let Some((id, body)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: "expected id<TAB>text".into(),
            });
        };
        if body.contains('\t') {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg: "text field contains a tab".into(),
            });
        }
        out.push((id.to_owned(), body.to_owned()));
    }
    Ok(out)
}

fn assign<'a>(
    kind: &'static str,
    ids: &[String],
    lookup: impl Fn(&str) -> Option<u32>,
    rows: &'a [(String, String)],
    require_nonempty: bool,
) -> Result<Vec<Option<&'a str>>> {
    let mut slots: Vec<Option<&str>> = vec![None; ids.len()];
    let mut unknown = 0usize;
    for (id, text) in rows {
        match lookup(id) {
            Some(i) => {
                let text = text.trim();
                if require_nonempty && text.is_empty() {
                    return Err(Error::Validation(format!("{kind} {id} has an empty mention")));
                }
                slots[i as usize] = Some(text);
            }
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("{unknown} {kind} rows refer to ids not in the KG");
    }
    Ok(slots)
}

fn require_all(kind: &'static str, ids: &[String], slots: &[Option<&str>]) -> Result<Vec<String>> {
    let missing: Vec<&str> = ids
        .iter()
        .zip(slots)
        .filter(|(_, s)| s.is_none())
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).copied().collect();
        return Err(Error::Validation(format!(
            "{} {kind}s lack a mention: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    Ok(slots.iter().map(|s| s.unwrap().to_owned()).collect())
}

impl TextStore {
    /// Builds the store from parsed rows. Every KG entity and relation needs
    /// a non-empty mention; rows for unknown ids are ignored with a warning.
    pub fn from_rows(
        kg: &KnowledgeGraph,
        entity_rows: &[(String, String)],
        relation_rows: &[(String, String)],
        description_rows: Option<&[(String, String)]>,
    ) -> Result<Self> {
        let ents = kg.entities();
        let rels = kg.relations();
        let e = assign("entity", ents.names(), |id| ents.id(id), entity_rows, true)?;
        let entity_mentions = require_all("entity", ents.names(), &e)?;
        let r = assign("relation", rels.names(), |id| rels.id(id), relation_rows, true)?;
        let relation_mentions = require_all("relation", rels.names(), &r)?;
        let descriptions = match description_rows {
            Some(rows) => assign("description", ents.names(), |id| ents.id(id), rows, false)?
                .into_iter()
                .map(|d| d.filter(|d| !d.is_empty()).map(str::to_owned))
                .collect(),
            None => vec![None; ents.len()],
        };
        Ok(Self::new(entity_mentions, relation_mentions, descriptions))
    }

    /// Builds a store directly from per-id mention vectors.
    pub fn new(
        entity_mentions: Vec<String>,
        relation_mentions: Vec<String>,
        descriptions: Vec<Option<String>>,
    ) -> Self {
        let mut mention_index: HashMap<String, Vec<EntityId>> = HashMap::new();
        for (i, m) in entity_mentions.iter().enumerate() {
            mention_index
                .entry(m.trim().to_owned())
                .or_default()
                .push(i as EntityId);
        }
        TextStore {
            entity_mentions,
            relation_mentions,
            descriptions,
            mention_index,
        }
    }

    pub fn entity_mention(&self, e: EntityId) -> &str {
        &self.entity_mentions[e as usize]
    }

    pub fn relation_mention(&self, r: RelationId) -> &str {
        &self.relation_mentions[r as usize]
    }

    pub fn description(&self, e: EntityId) -> Option<&str> {
        self.descriptions.get(e as usize).and_then(Option::as_deref)
    }

    pub fn has_descriptions(&self) -> bool {
        self.descriptions.iter().any(Option::is_some)
    }

    pub fn num_entities(&self) -> usize {
        self.entity_mentions.len()
    }

    /// Entities whose mention equals `text` after trimming surrounding
    /// whitespace. Ascending ids; empty when nothing matches.
    pub fn resolve_mention(&self, text: &str) -> &[EntityId] {
        self.mention_index
            .get(text.trim())
            .map_or(&[][..], Vec::as_slice)
    }
}

/// Loads mention and optional description files for `kg`.
pub fn load_text(
    kg: &KnowledgeGraph,
    entity_mentions: &Path,
    relation_mentions: &Path,
    descriptions: Option<&Path>,
) -> Result<TextStore> {
    let e = read_id_text(entity_mentions)?;
    let r = read_id_text(relation_mentions)?;
    let d = descriptions.map(read_id_text).transpose()?;
    TextStore::from_rows(kg, &e, &r, d.as_deref())
}
