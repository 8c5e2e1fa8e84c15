use alloc::collections::BTreeSet;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{EntityIdx, KnowledgeGraph};
use crate::schema::{EntityType, RelationId};

/// One of the seventeen question families `Q1`..`Q17`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateId(u8);

impl TemplateId {
    pub const COUNT: usize = 17;

    pub fn new(n: u8) -> Option<TemplateId> {
        (1..=Self::COUNT as u8)
            .contains(&n)
            .then_some(TemplateId(n))
    }

    pub fn all() -> impl Iterator<Item = TemplateId> + Clone {
        (1..=Self::COUNT as u8).map(TemplateId)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Accepts `Q7`, `q7` or `7`.
    pub fn parse(s: &str) -> Option<TemplateId> {
        let s = s.trim();
        let digits = s.strip_prefix(['Q', 'q']).unwrap_or(s);
        digits.parse().ok().and_then(TemplateId::new)
    }

    pub fn spec(self) -> &'static TemplateSpec {
        &TEMPLATES[self.0 as usize - 1]
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as Deserialize>::deserialize(d)?;
        TemplateId::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(alloc::format!("unknown template {s}")))
    }
}

/// Static description of a question family.
#[derive(Debug)]
pub struct TemplateSpec {
    pub id: u8,
    /// Type of the observed entity the programs start from.
    pub grounded: EntityType,
    pub answer: EntityType,
    /// Relation paths realizing the traversal, starting at `grounded`.
    pub programs: &'static [&'static [RelationId]],
    /// Whether the answer set carries constraints (frequency maxima,
    /// inequalities, exclusions) that a plain relation path cannot express.
    pub constrained: bool,
    pub question: &'static str,
}

use EntityType::{Domain, Purpose, Step, Task, Tool};
use RelationId as R;

static TEMPLATES: [TemplateSpec; 17] = [
    TemplateSpec {
        id: 1,
        grounded: Step,
        answer: Tool,
        programs: &[&[R::HAS_TOOL]],
        constrained: false,
        question: "Which tool is needed to carry out the step shown?",
    },
    TemplateSpec {
        id: 2,
        grounded: Step,
        answer: Step,
        programs: &[&[R::HAS_NEXT_STEP]],
        constrained: true,
        question: "Which step most often comes right after the one shown?",
    },
    TemplateSpec {
        id: 3,
        grounded: Step,
        answer: Step,
        programs: &[&[R::HAS_NEXT_STEP]],
        constrained: false,
        question: "Which step can follow the one shown?",
    },
    TemplateSpec {
        id: 4,
        grounded: Step,
        answer: Step,
        programs: &[&[R::HAS_PREVIOUS_STEP]],
        constrained: false,
        question: "Which step can come right before the one shown?",
    },
    TemplateSpec {
        id: 5,
        grounded: Step,
        answer: Step,
        programs: &[&[R::HAS_PREVIOUS_STEP]],
        constrained: true,
        question: "Which step most often comes right before the one shown?",
    },
    TemplateSpec {
        id: 6,
        grounded: Step,
        answer: Tool,
        programs: &[&[R::HAS_NEXT_STEP, R::HAS_TOOL]],
        constrained: false,
        question: "Which tool might the following step require?",
    },
    TemplateSpec {
        id: 7,
        grounded: Task,
        answer: Step,
        programs: &[&[R::HAS_STEP]],
        constrained: true,
        question: "Which step usually opens this task?",
    },
    TemplateSpec {
        id: 8,
        grounded: Task,
        answer: Step,
        programs: &[&[R::HAS_STEP]],
        constrained: true,
        question: "Which step usually closes this task?",
    },
    TemplateSpec {
        id: 9,
        grounded: Task,
        answer: Domain,
        programs: &[&[R::IN_DOMAIN]],
        constrained: false,
        question: "Which domain is this task part of?",
    },
    TemplateSpec {
        id: 10,
        grounded: Step,
        answer: Purpose,
        programs: &[&[R::HAS_TOOL, R::HAS_PURPOSE]],
        constrained: false,
        question: "What is the tool used in the shown step for?",
    },
    TemplateSpec {
        id: 11,
        grounded: Step,
        answer: Purpose,
        programs: &[&[R::HAS_ACTION, R::ACTION_HAS_PURPOSE]],
        constrained: false,
        question: "What does the action in the shown step accomplish?",
    },
    TemplateSpec {
        id: 12,
        grounded: Step,
        answer: Purpose,
        programs: &[&[R::HAS_OBJECT, R::OBJECT_HAS_PURPOSE]],
        constrained: false,
        question: "What is the object handled in the shown step for?",
    },
    TemplateSpec {
        id: 13,
        grounded: Step,
        answer: Purpose,
        programs: &[&[R::HAS_TOOL, R::HAS_PURPOSE]],
        constrained: true,
        question: "Besides its role in the shown step, what else can the tool be used for?",
    },
    TemplateSpec {
        id: 14,
        grounded: Step,
        answer: Purpose,
        programs: &[&[R::HAS_OBJECT, R::OBJECT_HAS_PURPOSE]],
        constrained: true,
        question:
            "Apart from how it is used in the shown step, what other use does the object have?",
    },
    TemplateSpec {
        id: 15,
        grounded: Step,
        answer: Tool,
        programs: &[
            &[
                R::HAS_TOOL,
                R::HAS_PURPOSE,
                R::HAS_SIMILAR_PURPOSE,
                R::PURPOSE_TO_TOOL,
            ],
            &[R::HAS_TOOL, R::HAS_PURPOSE, R::PURPOSE_TO_TOOL],
        ],
        constrained: true,
        question: "Which other tool could replace the one used in the shown step?",
    },
    TemplateSpec {
        id: 16,
        grounded: Step,
        answer: Task,
        programs: &[
            &[
                R::HAS_TOOL,
                R::HAS_PURPOSE,
                R::PURPOSE_TO_TOOL,
                R::TOOL_TO_STEP,
                R::IN_TASK,
            ],
            &[R::HAS_TOOL, R::TOOL_TO_STEP, R::IN_TASK],
        ],
        constrained: true,
        question: "Which other task relies on the tool from the shown step?",
    },
    TemplateSpec {
        id: 17,
        grounded: Step,
        answer: Task,
        programs: &[
            &[
                R::HAS_OBJECT,
                R::OBJECT_HAS_PURPOSE,
                R::PURPOSE_TO_OBJECT,
                R::OBJECT_IN_STEP,
                R::IN_TASK,
            ],
            &[R::HAS_OBJECT, R::OBJECT_IN_STEP, R::IN_TASK],
        ],
        constrained: true,
        question: "Which other task makes use of the object from the shown step?",
    },
];

/// Observed entities a question is asked about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Binding {
    pub task: EntityIdx,
    /// Absent for task-level templates.
    pub step: Option<EntityIdx>,
}

/// All bindings of the template's observed slots, in a stable order.
pub fn bindings(kg: &KnowledgeGraph, tid: TemplateId) -> alloc::vec::Vec<Binding> {
    let tasks = kg.entities_of(Task);
    match tid.spec().grounded {
        Task => tasks
            .into_iter()
            .map(|task| Binding { task, step: None })
            .collect(),
        _ => tasks
            .into_iter()
            .flat_map(|task| {
                kg.tails(task, R::HAS_STEP).map(move |s| Binding {
                    task,
                    step: Some(s),
                })
            })
            .collect(),
    }
}

fn image(kg: &KnowledgeGraph, from: EntityIdx, path: &[RelationId]) -> BTreeSet<EntityIdx> {
    let mut set = BTreeSet::new();
    set.insert(from);
    for &r in path {
        set = set.iter().flat_map(|&h| kg.tails(h, r)).collect();
    }
    set
}

fn union_over(
    from: &BTreeSet<EntityIdx>,
    f: impl Fn(EntityIdx) -> BTreeSet<EntityIdx>,
) -> BTreeSet<EntityIdx> {
    from.iter().flat_map(|&x| f(x)).collect()
}

/// The symbolic answer set of a template under a binding. This is the ground
/// truth the generated questions are checked against.
pub fn oracle_answers(kg: &KnowledgeGraph, tid: TemplateId, b: Binding) -> BTreeSet<EntityIdx> {
    let spec = tid.spec();
    let step_typed = |e: &EntityIdx| kg.etype(*e) == Step;
    let task_steps = kg.tail_set(b.task, R::HAS_STEP);
    let most_frequent =
        |head: Option<EntityIdx>, rel: RelationId, keep: &dyn Fn(EntityIdx) -> bool| {
            head.and_then(|h| kg.most_frequent_among(h, rel, keep).ok())
                .into_iter()
                .collect::<BTreeSet<_>>()
        };

    let answers: BTreeSet<EntityIdx> = match (tid.0, b.step) {
        (7, _) => most_frequent(kg.sentinel(EntityType::Start), R::HAS_NEXT_STEP, &|e| {
            task_steps.contains(&e)
        }),
        (8, _) => most_frequent(kg.sentinel(EntityType::End), R::HAS_PREVIOUS_STEP, &|e| {
            task_steps.contains(&e)
        }),
        (9, _) => kg.tail_set(b.task, R::IN_DOMAIN),
        (_, None) => BTreeSet::new(),
        (2, Some(s)) => most_frequent(Some(s), R::HAS_NEXT_STEP, &|e| step_typed(&e)),
        (5, Some(s)) => most_frequent(Some(s), R::HAS_PREVIOUS_STEP, &|e| step_typed(&e)),
        (13, Some(s)) => {
            let intended = image(kg, s, &[R::HAS_ACTION, R::ACTION_HAS_PURPOSE]);
            let mut all = image(kg, s, &[R::HAS_TOOL, R::HAS_PURPOSE]);
            all.retain(|p| !intended.contains(p));
            all
        }
        (14, Some(s)) => {
            let intended = image(kg, s, &[R::HAS_ACTION, R::ACTION_HAS_PURPOSE]);
            let mut all = image(kg, s, &[R::HAS_OBJECT, R::OBJECT_HAS_PURPOSE]);
            all.retain(|p| !intended.contains(p));
            all
        }
        (15, Some(s)) => union_over(&kg.tail_set(s, R::HAS_TOOL), |t2| {
            let p2 = kg.tail_set(t2, R::HAS_PURPOSE);
            let p3 = union_over(&p2, |p| kg.tail_set(p, R::HAS_SIMILAR_PURPOSE));
            let mut tools = union_over(&(&p2 | &p3), |p| kg.tail_set(p, R::PURPOSE_TO_TOOL));
            tools.remove(&t2);
            tools
        }),
        (16 | 17, Some(s)) => {
            let (has, purpose, used_in) = if tid.0 == 16 {
                (R::HAS_TOOL, R::HAS_PURPOSE, R::TOOL_TO_STEP)
            } else {
                (R::HAS_OBJECT, R::OBJECT_HAS_PURPOSE, R::OBJECT_IN_STEP)
            };
            let mut tasks = union_over(&kg.tail_set(s, has), |x| {
                if kg.tails(x, purpose).next().is_none() {
                    return BTreeSet::new();
                }
                image(kg, x, &[used_in, R::IN_TASK])
            });
            tasks.remove(&b.task);
            tasks
        }
        (_, Some(s)) => image(kg, s, spec.programs[0]),
    };
    answers
        .into_iter()
        .filter(|e| kg.etype(*e) == spec.answer)
        .collect()
}
