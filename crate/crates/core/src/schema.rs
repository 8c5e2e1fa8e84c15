//! The fixed procedural graph schema: entity types and typed relations.

use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Domain,
    Task,
    Step,
    Action,
    Object,
    Tool,
    Purpose,
    Start,
    End,
}

impl EntityType {
    pub const ALL: [EntityType; 9] = [
        EntityType::Domain,
        EntityType::Task,
        EntityType::Step,
        EntityType::Action,
        EntityType::Object,
        EntityType::Tool,
        EntityType::Purpose,
        EntityType::Start,
        EntityType::End,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::Domain => "Domain",
            EntityType::Task => "Task",
            EntityType::Step => "Step",
            EntityType::Action => "Action",
            EntityType::Object => "Object",
            EntityType::Tool => "Tool",
            EntityType::Purpose => "Purpose",
            EntityType::Start => "Start",
            EntityType::End => "End",
        }
    }

    pub fn parse(s: &str) -> Option<EntityType> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
    }

    /// `Start` and `End` are singleton sentinels marking task boundaries.
    pub fn is_sentinel(self) -> bool {
        matches!(self, EntityType::Start | EntityType::End)
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed binary relation of the schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationType {
    pub name: &'static str,
    pub head: EntityType,
    pub tail: EntityType,
    pub inverse_name: &'static str,
    pub frequency_weighted: bool,
    /// Sentinel type additionally admitted in head position.
    pub head_extra: Option<EntityType>,
    /// Sentinel type additionally admitted in tail position.
    pub tail_extra: Option<EntityType>,
    pub forward: bool,
}

impl RelationType {
    pub fn admits(&self, head: EntityType, tail: EntityType) -> bool {
        (head == self.head || Some(head) == self.head_extra)
            && (tail == self.tail || Some(tail) == self.tail_extra)
    }

    /// Entity types that may appear as tails (declared type first).
    pub fn tail_types(&self) -> impl Iterator<Item = EntityType> {
        core::iter::once(self.tail).chain(self.tail_extra)
    }

    pub fn head_types(&self) -> impl Iterator<Item = EntityType> {
        core::iter::once(self.head).chain(self.head_extra)
    }
}

macro_rules! rel {
    ($name:literal, $h:ident -> $t:ident, $inv:literal, $fw:expr) => {
        RelationType {
            name: $name,
            head: EntityType::$h,
            tail: EntityType::$t,
            inverse_name: $inv,
            frequency_weighted: false,
            head_extra: None,
            tail_extra: None,
            forward: $fw,
        }
    };
}

/// Forward relations occupy even slots, each inverse sits right after it.
static RELATIONS: [RelationType; 20] = [
    rel!("HAS_TASK", Domain -> Task, "IN_DOMAIN", true),
    rel!("IN_DOMAIN", Task -> Domain, "HAS_TASK", false),
    rel!("HAS_STEP", Task -> Step, "IN_TASK", true),
    rel!("IN_TASK", Step -> Task, "HAS_STEP", false),
    RelationType {
        name: "HAS_NEXT_STEP",
        head: EntityType::Step,
        tail: EntityType::Step,
        inverse_name: "HAS_PREVIOUS_STEP",
        frequency_weighted: true,
        head_extra: Some(EntityType::Start),
        tail_extra: Some(EntityType::End),
        forward: true,
    },
    RelationType {
        name: "HAS_PREVIOUS_STEP",
        head: EntityType::Step,
        tail: EntityType::Step,
        inverse_name: "HAS_NEXT_STEP",
        frequency_weighted: false,
        head_extra: Some(EntityType::End),
        tail_extra: Some(EntityType::Start),
        forward: false,
    },
    rel!("HAS_ACTION", Step -> Action, "ACTION_IN_STEP", true),
    rel!("ACTION_IN_STEP", Action -> Step, "HAS_ACTION", false),
    rel!("HAS_OBJECT", Step -> Object, "OBJECT_IN_STEP", true),
    rel!("OBJECT_IN_STEP", Object -> Step, "HAS_OBJECT", false),
    rel!("HAS_TOOL", Step -> Tool, "TOOL_TO_STEP", true),
    rel!("TOOL_TO_STEP", Tool -> Step, "HAS_TOOL", false),
    rel!("HAS_PURPOSE", Tool -> Purpose, "PURPOSE_TO_TOOL", true),
    rel!("PURPOSE_TO_TOOL", Purpose -> Tool, "HAS_PURPOSE", false),
    rel!("ACTION_HAS_PURPOSE", Action -> Purpose, "PURPOSE_TO_ACTION", true),
    rel!("PURPOSE_TO_ACTION", Purpose -> Action, "ACTION_HAS_PURPOSE", false),
    rel!("OBJECT_HAS_PURPOSE", Object -> Purpose, "PURPOSE_TO_OBJECT", true),
    rel!("PURPOSE_TO_OBJECT", Purpose -> Object, "OBJECT_HAS_PURPOSE", false),
    rel!("HAS_SIMILAR_PURPOSE", Purpose -> Purpose, "SIMILAR_PURPOSE_OF", true),
    rel!("SIMILAR_PURPOSE_OF", Purpose -> Purpose, "HAS_SIMILAR_PURPOSE", false),
];

/// Index of a relation (forward or inverse) in the schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(u8);

impl RelationId {
    pub const COUNT: usize = RELATIONS.len();

    pub const HAS_TASK: RelationId = RelationId(0);
    pub const IN_DOMAIN: RelationId = RelationId(1);
    pub const HAS_STEP: RelationId = RelationId(2);
    pub const IN_TASK: RelationId = RelationId(3);
    pub const HAS_NEXT_STEP: RelationId = RelationId(4);
    pub const HAS_PREVIOUS_STEP: RelationId = RelationId(5);
    pub const HAS_ACTION: RelationId = RelationId(6);
    pub const ACTION_IN_STEP: RelationId = RelationId(7);
    pub const HAS_OBJECT: RelationId = RelationId(8);
    pub const OBJECT_IN_STEP: RelationId = RelationId(9);
    pub const HAS_TOOL: RelationId = RelationId(10);
    pub const TOOL_TO_STEP: RelationId = RelationId(11);
    pub const HAS_PURPOSE: RelationId = RelationId(12);
    pub const PURPOSE_TO_TOOL: RelationId = RelationId(13);
    pub const ACTION_HAS_PURPOSE: RelationId = RelationId(14);
    pub const PURPOSE_TO_ACTION: RelationId = RelationId(15);
    pub const OBJECT_HAS_PURPOSE: RelationId = RelationId(16);
    pub const PURPOSE_TO_OBJECT: RelationId = RelationId(17);
    pub const HAS_SIMILAR_PURPOSE: RelationId = RelationId(18);
    pub const SIMILAR_PURPOSE_OF: RelationId = RelationId(19);

    pub fn all() -> impl Iterator<Item = RelationId> + Clone {
        (0..RELATIONS.len() as u8).map(RelationId)
    }

    pub fn forward_relations() -> impl Iterator<Item = RelationId> + Clone {
        Self::all().filter(|r| r.info().forward)
    }

    pub fn from_index(i: usize) -> Option<RelationId> {
        (i < RELATIONS.len()).then_some(RelationId(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn info(self) -> &'static RelationType {
        &RELATIONS[self.0 as usize]
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    pub fn inverse(self) -> RelationId {
        RelationId(self.0 ^ 1)
    }

    pub fn parse(name: &str) -> Option<RelationId> {
        // STEP_TO_TASK is a common alias for IN_TASK in generated programs.
        let name = name.trim();
        if name.eq_ignore_ascii_case("STEP_TO_TASK") {
            return Some(RelationId::IN_TASK);
        }
        RELATIONS
            .iter()
            .position(|r| r.name.eq_ignore_ascii_case(name))
            .map(|i| RelationId(i as u8))
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for RelationId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <alloc::string::String as Deserialize>::deserialize(d)?;
        RelationId::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(alloc::format!("unknown relation {s}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_inverse_is_identity() {
        for r in RelationId::all() {
            assert_eq!(r.inverse().inverse(), r);
            assert_ne!(r.inverse(), r);
            assert_eq!(r.info().inverse_name, r.inverse().name());
            assert_eq!(r.info().head, r.inverse().info().tail);
            assert_eq!(r.info().tail, r.inverse().info().head);
            assert_eq!(r.info().head_extra, r.inverse().info().tail_extra);
            assert_ne!(r.info().forward, r.inverse().info().forward);
        }
    }

    #[test]
    fn only_next_step_is_frequency_weighted() {
        let weighted: alloc::vec::Vec<_> = RelationId::all()
            .filter(|r| r.info().frequency_weighted)
            .collect();
        assert_eq!(weighted, [RelationId::HAS_NEXT_STEP]);
    }

    #[test]
    fn names_round_trip() {
        for r in RelationId::all() {
            assert_eq!(RelationId::parse(r.name()), Some(r));
        }
        for t in EntityType::ALL {
            assert_eq!(EntityType::parse(t.name()), Some(t));
        }
        assert_eq!(RelationId::parse("HAS_WHATEVER"), None);
    }

    #[test]
    fn sentinels_only_through_next_step() {
        let next = RelationId::HAS_NEXT_STEP.info();
        assert!(next.admits(EntityType::Start, EntityType::Step));
        assert!(next.admits(EntityType::Step, EntityType::End));
        assert!(!next.admits(EntityType::End, EntityType::Step));
        assert!(!RelationId::HAS_TOOL
            .info()
            .admits(EntityType::Start, EntityType::Tool));
    }
}
