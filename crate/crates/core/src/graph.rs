//! Typed knowledge-graph storage with inverse closure and a symbolic
//! traversal oracle.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{EntityType, RelationId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityIdx(pub u32);

impl EntityIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub etype: EntityType,
    #[serde(default)]
    pub name: String,
}

impl Entity {
    pub fn new(id: impl Into<String>, etype: EntityType, name: impl Into<String>) -> Self {
        Entity {
            id: id.into(),
            etype,
            name: name.into(),
        }
    }

    /// Human-readable label, falling back to the id.
    pub fn label(&self) -> &str {
        if self.name.is_empty() {
            &self.id
        } else {
            &self.name
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<u32>,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triplet {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            freq: None,
        }
    }

    pub fn with_freq(mut self, freq: u32) -> Self {
        self.freq = Some(freq);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum KgError {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("duplicate entity id `{0}`")]
    DuplicateEntity(String),
    #[error("entity `{0}` needs a non-empty name")]
    EmptyName(String),
    #[error("only one {0} entity is allowed")]
    DuplicateSentinel(EntityType),
    #[error("schema violation: {head} ({head_type}) -{relation}-> {tail} ({tail_type})")]
    SchemaViolation {
        head: String,
        head_type: EntityType,
        relation: String,
        tail: String,
        tail_type: EntityType,
    },
    #[error("{relation} triplet {head} -> {tail}: {reason}")]
    BadFrequency {
        head: String,
        relation: String,
        tail: String,
        reason: &'static str,
    },
    #[error("incompatible path: {0}")]
    IncompatiblePath(String),
    #[error("relation {0} is not frequency weighted")]
    NotFrequencyWeighted(String),
    #[error("`{head}` has no tails under {relation}")]
    NoTails { head: String, relation: String },
    #[error("graph is frozen")]
    Frozen,
}

type Adjacency = BTreeMap<EntityIdx, BTreeMap<EntityIdx, Option<u32>>>;

/// Entities plus per-relation adjacency. Every stored edge has its inverse
/// stored under the inverse relation, so the forward index of a relation is
/// the backward index of its inverse.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    by_id: BTreeMap<String, EntityIdx>,
    adjacency: Vec<Adjacency>,
    frozen: bool,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        KnowledgeGraph {
            entities: Vec::new(),
            by_id: BTreeMap::new(),
            adjacency: (0..RelationId::COUNT).map(|_| Adjacency::new()).collect(),
            frozen: false,
        }
    }

    /// Builds a graph from raw parts, collecting every violation instead of
    /// stopping at the first one.
    pub fn build(entities: &[Entity], triplets: &[Triplet]) -> Result<Self, Vec<KgError>> {
        let mut kg = KnowledgeGraph::new();
        let mut errors = Vec::new();
        for e in entities {
            if let Err(err) = kg.add_entity(e.clone()) {
                errors.push(err);
            }
        }
        for t in triplets {
            if let Err(err) = kg.add_triplet(t) {
                errors.push(err);
            }
        }
        if errors.is_empty() {
            kg.freeze();
            Ok(kg)
        } else {
            Err(errors)
        }
    }

    pub fn add_entity(&mut self, entity: Entity) -> Result<EntityIdx, KgError> {
        if self.frozen {
            return Err(KgError::Frozen);
        }
        if self.by_id.contains_key(&entity.id) {
            return Err(KgError::DuplicateEntity(entity.id));
        }
        if entity.etype.is_sentinel() {
            if !self.entities_of(entity.etype).is_empty() {
                return Err(KgError::DuplicateSentinel(entity.etype));
            }
        } else if entity.name.trim().is_empty() {
            return Err(KgError::EmptyName(entity.id));
        }
        let idx = EntityIdx(self.entities.len() as u32);
        self.by_id.insert(entity.id.clone(), idx);
        self.entities.push(entity);
        Ok(idx)
    }

    /// Inserts a triplet and its inverse. Re-inserting an existing edge keeps
    /// the larger frequency.
    pub fn add_triplet(&mut self, t: &Triplet) -> Result<(), KgError> {
        if self.frozen {
            return Err(KgError::Frozen);
        }
        let rel = RelationId::parse(&t.relation)
            .ok_or_else(|| KgError::UnknownRelation(t.relation.clone()))?;
        let head = self.idx(&t.head)?;
        let tail = self.idx(&t.tail)?;
        self.insert_edge(head, rel, tail, t.freq)
    }

    pub fn insert_edge(
        &mut self,
        head: EntityIdx,
        rel: RelationId,
        tail: EntityIdx,
        freq: Option<u32>,
    ) -> Result<(), KgError> {
        if self.frozen {
            return Err(KgError::Frozen);
        }
        let info = rel.info();
        let (ht, tt) = (
            self.entities[head.index()].etype,
            self.entities[tail.index()].etype,
        );
        if !info.admits(ht, tt) {
            return Err(KgError::SchemaViolation {
                head: self.entities[head.index()].id.clone(),
                head_type: ht,
                relation: info.name.to_string(),
                tail: self.entities[tail.index()].id.clone(),
                tail_type: tt,
            });
        }
        let weighted = info.frequency_weighted || rel.inverse().info().frequency_weighted;
        let bad = |reason| KgError::BadFrequency {
            head: self.entities[head.index()].id.clone(),
            relation: info.name.to_string(),
            tail: self.entities[tail.index()].id.clone(),
            reason,
        };
        match (weighted, freq) {
            (true, None) => return Err(bad("frequency required")),
            (true, Some(0)) => return Err(bad("frequency must be positive")),
            (false, Some(_)) => return Err(bad("relation does not carry frequencies")),
            _ => {}
        }
        self.put(head, rel, tail, freq);
        self.put(tail, rel.inverse(), head, freq);
        Ok(())
    }

    fn put(&mut self, head: EntityIdx, rel: RelationId, tail: EntityIdx, freq: Option<u32>) {
        let slot = self.adjacency[rel.index()]
            .entry(head)
            .or_default()
            .entry(tail)
            .or_insert(freq);
        if let (Some(old), Some(new)) = (*slot, freq) {
            *slot = Some(old.max(new));
        }
    }

    /// After freezing the graph is read-only.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity(&self, idx: EntityIdx) -> &Entity {
        &self.entities[idx.index()]
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityIdx, &Entity)> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| (EntityIdx(i as u32), e))
    }

    pub fn idx(&self, id: &str) -> Result<EntityIdx, KgError> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| KgError::UnknownEntity(id.to_string()))
    }

    pub fn id(&self, idx: EntityIdx) -> &str {
        &self.entities[idx.index()].id
    }

    pub fn etype(&self, idx: EntityIdx) -> EntityType {
        self.entities[idx.index()].etype
    }

    pub fn entities_of(&self, etype: EntityType) -> Vec<EntityIdx> {
        self.entities()
            .filter(|(_, e)| e.etype == etype)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sentinel(&self, etype: EntityType) -> Option<EntityIdx> {
        debug_assert!(etype.is_sentinel());
        self.entities_of(etype).first().copied()
    }

    /// The tail set of `head` under `rel`, with frequencies where present.
    pub fn tail_map(
        &self,
        head: EntityIdx,
        rel: RelationId,
    ) -> Option<&BTreeMap<EntityIdx, Option<u32>>> {
        self.adjacency[rel.index()].get(&head)
    }

    pub fn tails(&self, head: EntityIdx, rel: RelationId) -> impl Iterator<Item = EntityIdx> + '_ {
        self.tail_map(head, rel)
            .into_iter()
            .flat_map(|m| m.keys().copied())
    }

    pub fn tail_set(&self, head: EntityIdx, rel: RelationId) -> BTreeSet<EntityIdx> {
        self.tails(head, rel).collect()
    }

    pub fn has_edge(&self, head: EntityIdx, rel: RelationId, tail: EntityIdx) -> bool {
        self.tail_map(head, rel)
            .is_some_and(|m| m.contains_key(&tail))
    }

    /// Tail ids of `head_id` under the named relation.
    pub fn tails_by_id(&self, head_id: &str, relation: &str) -> Result<BTreeSet<String>, KgError> {
        let head = self.idx(head_id)?;
        let rel = RelationId::parse(relation)
            .ok_or_else(|| KgError::UnknownRelation(relation.to_string()))?;
        Ok(self
            .tails(head, rel)
            .map(|t| self.id(t).to_string())
            .collect())
    }

    pub fn freq(&self, head: EntityIdx, rel: RelationId, tail: EntityIdx) -> Option<u32> {
        self.tail_map(head, rel)
            .and_then(|m| m.get(&tail).copied().flatten())
    }

    /// Heads that have at least one tail under `rel`.
    pub fn heads(&self, rel: RelationId) -> impl Iterator<Item = EntityIdx> + '_ {
        self.adjacency[rel.index()]
            .iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(h, _)| *h)
    }

    pub fn triplet_count(&self, rel: RelationId) -> usize {
        self.adjacency[rel.index()].values().map(|m| m.len()).sum()
    }

    /// Every stored edge, inverse edges included.
    pub fn edges(
        &self,
    ) -> impl Iterator<Item = (EntityIdx, RelationId, EntityIdx, Option<u32>)> + '_ {
        RelationId::all().flat_map(move |r| {
            self.adjacency[r.index()]
                .iter()
                .flat_map(move |(h, m)| m.iter().map(move |(t, f)| (*h, r, *t, *f)))
        })
    }

    /// Forward-relation triplets only, in deterministic order.
    pub fn forward_triplets(&self) -> Vec<Triplet> {
        self.edges()
            .filter(|(_, r, _, _)| r.info().forward)
            .map(|(h, r, t, f)| Triplet {
                head: self.id(h).to_string(),
                relation: r.name().to_string(),
                tail: self.id(t).to_string(),
                freq: f,
            })
            .collect()
    }

    /// Checks that consecutive hops are type-compatible.
    pub fn check_path(path: &[RelationId]) -> Result<(), KgError> {
        if path.is_empty() {
            return Err(KgError::IncompatiblePath("empty path".into()));
        }
        for w in path.windows(2) {
            if w[0].info().tail != w[1].info().head {
                return Err(KgError::IncompatiblePath(alloc::format!(
                    "{} ends at {} but {} starts at {}",
                    w[0],
                    w[0].info().tail,
                    w[1],
                    w[1].info().head
                )));
            }
        }
        Ok(())
    }

    /// Breadth-first image of `start` under the relation composition.
    pub fn traverse(
        &self,
        start: &BTreeSet<EntityIdx>,
        path: &[RelationId],
    ) -> Result<BTreeSet<EntityIdx>, KgError> {
        Self::check_path(path)?;
        let mut frontier = start.clone();
        for &rel in path {
            frontier = frontier.iter().flat_map(|&h| self.tails(h, rel)).collect();
            if frontier.is_empty() {
                break;
            }
        }
        Ok(frontier)
    }

    /// Tail with the largest frequency; equal counts resolve to the
    /// lexicographically smallest entity id. Inverse relations of a
    /// frequency-weighted relation rank by the mirrored edge's count.
    pub fn most_frequent_tail(
        &self,
        head: EntityIdx,
        rel: RelationId,
    ) -> Result<EntityIdx, KgError> {
        self.most_frequent_among(head, rel, |_| true)
    }

    pub fn most_frequent_among(
        &self,
        head: EntityIdx,
        rel: RelationId,
        keep: impl Fn(EntityIdx) -> bool,
    ) -> Result<EntityIdx, KgError> {
        if !(rel.info().frequency_weighted || rel.inverse().info().frequency_weighted) {
            return Err(KgError::NotFrequencyWeighted(rel.name().to_string()));
        }
        let no_tails = || KgError::NoTails {
            head: self.id(head).to_string(),
            relation: rel.name().to_string(),
        };
        let map = self.tail_map(head, rel).ok_or_else(no_tails)?;
        map.iter()
            .filter(|(t, _)| keep(**t))
            .map(|(t, f)| (*t, f.unwrap_or(0)))
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| self.id(b.0).cmp(self.id(a.0))))
            .map(|(t, _)| t)
            .ok_or_else(no_tails)
    }

    /// Full scan for edges whose inverse is missing.
    pub fn inverse_closure_violations(&self) -> usize {
        self.edges()
            .filter(|(h, r, t, f)| self.tail_map(*t, r.inverse()).and_then(|m| m.get(h)) != Some(f))
            .count()
    }

    /// Full scan for edges that violate head/tail typing.
    pub fn schema_violations(&self) -> usize {
        self.edges()
            .filter(|(h, r, t, _)| !r.info().admits(self.etype(*h), self.etype(*t)))
            .count()
    }
}

/// The small tea/coffee graph used throughout the tests and docs.
pub mod fixture {
    use super::*;
    use alloc::vec;

    /// The tea/coffee toy graph also shipped as `toy_kg.json`.
    pub fn toy() -> KnowledgeGraph {
        let (entities, triplets) = toy_parts();
        KnowledgeGraph::build(&entities, &triplets).expect("toy graph is valid")
    }

    pub fn toy_parts() -> (Vec<Entity>, Vec<Triplet>) {
        use EntityType::*;
        let entities = vec![
            Entity::new("START", Start, ""),
            Entity::new("END", End, ""),
            Entity::new("cooking", Domain, "cooking"),
            Entity::new("make_tea", Task, "make tea"),
            Entity::new("make_coffee", Task, "make coffee"),
            Entity::new("boil_water", Step, "boil water"),
            Entity::new("pour_water", Step, "pour water"),
            Entity::new("grind_beans", Step, "grind beans"),
            Entity::new("brew", Step, "brew"),
            Entity::new("kettle", Tool, "kettle"),
            Entity::new("cup", Tool, "cup"),
            Entity::new("grinder", Tool, "grinder"),
            Entity::new("heat_water", Purpose, "heat water"),
            Entity::new("hold_liquid", Purpose, "hold liquid"),
            Entity::new("grind_things", Purpose, "grind things"),
        ];
        let t = Triplet::new;
        let triplets = vec![
            t("cooking", "HAS_TASK", "make_tea"),
            t("cooking", "HAS_TASK", "make_coffee"),
            t("make_tea", "HAS_STEP", "boil_water"),
            t("make_tea", "HAS_STEP", "pour_water"),
            t("make_coffee", "HAS_STEP", "grind_beans"),
            t("make_coffee", "HAS_STEP", "boil_water"),
            t("make_coffee", "HAS_STEP", "brew"),
            t("START", "HAS_NEXT_STEP", "boil_water").with_freq(3),
            t("START", "HAS_NEXT_STEP", "grind_beans").with_freq(1),
            t("grind_beans", "HAS_NEXT_STEP", "boil_water").with_freq(1),
            t("boil_water", "HAS_NEXT_STEP", "pour_water").with_freq(3),
            t("boil_water", "HAS_NEXT_STEP", "brew").with_freq(1),
            t("pour_water", "HAS_NEXT_STEP", "END").with_freq(3),
            t("brew", "HAS_NEXT_STEP", "END").with_freq(1),
            t("boil_water", "HAS_TOOL", "kettle"),
            t("pour_water", "HAS_TOOL", "kettle"),
            t("pour_water", "HAS_TOOL", "cup"),
            t("grind_beans", "HAS_TOOL", "grinder"),
            t("brew", "HAS_TOOL", "cup"),
            t("kettle", "HAS_PURPOSE", "heat_water"),
            t("cup", "HAS_PURPOSE", "hold_liquid"),
            t("grinder", "HAS_PURPOSE", "grind_things"),
        ];
        (entities, triplets)
    }
}
