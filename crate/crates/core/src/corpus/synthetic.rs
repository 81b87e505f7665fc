//! Seeded generator for a small ACE-flavoured corpus.
//!
//! Every mention is one template-composed sentence. Each role filler is
//! introduced by a role-specific cue phrase ("by gunmen loyal to X"), and
//! one distractor entity (a news source) sits either before or after the
//! trigger clause. The generator also carries a context-aware question
//! pattern per (event type, role) that names the cue words; these play the
//! part of the dynamic templates used as fine-tuning targets.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Corpus, CorpusError, CorpusMetadata, EventInstance, Interrogative, RoleOntology, Source, Split,
    Trigger,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    Person,
    Group,
    Place,
    Org,
    Weapon,
    Vehicle,
    Position,
    Agency,
}

const PERSONS: &[&str] = &[
    "Callum McCarthy",
    "Howard Davies",
    "Tom Andrews",
    "Matt Reersen",
    "Dale Bumpers",
    "Barry Diller",
    "Maria Lopez",
    "Ahmed Karim",
    "Elena Petrova",
    "John Carter",
    "Yuki Tanaka",
    "Samuel Okafor",
    "Laura Chen",
    "Omar Haddad",
    "Ivan Sokolov",
    "Grace Miller",
    "Pedro Alvarez",
    "Nadia Rahman",
];
const GROUPS: &[&str] = &[
    "Marines",
    "Rangers",
    "Hezbollah",
    "Taliban",
    "Hamas",
    "Peshmerga",
    "Mahdi Army",
    "Republican Guard",
    "Fedayeen",
    "Ansar",
];
const PLACES: &[&str] = &[
    "Baghdad",
    "Falluja",
    "Tikrit",
    "Mosul",
    "Basra",
    "Kabul",
    "Chamchamal",
    "London",
    "Geneva",
    "Nairobi",
    "Houston",
    "Karachi",
    "Ramadi",
    "Kirkuk",
    "Najaf",
    "Amman",
];
const ORGS: &[&str] = &[
    "WorldCom",
    "Enron",
    "Vivendi",
    "Parmalat",
    "Swissair",
    "Kmart",
    "Global Crossing",
    "Adelphia",
    "Tyco",
    "Halliburton",
];
const WEAPONS: &[&str] = &[
    "Katyusha", "Stinger", "Hellfire", "Scud", "Tomahawk", "Grad", "Maverick",
];
const VEHICLES: &[&str] = &[
    "Boeing", "Chinook", "Antonov", "Hercules", "Ilyushin", "Airbus",
];
const POSITIONS: &[&str] = &[
    "Chairman",
    "Ambassador",
    "Director",
    "Governor",
    "Treasurer",
    "Chancellor",
];
const AGENCIES: &[&str] = &[
    "Interpol",
    "Scotland Yard",
    "Europol",
    "Carabinieri",
    "Mossad",
    "Gendarmerie",
];
const SOURCES: &[&str] = &[
    "Reuters",
    "Interfax",
    "Xinhua",
    "Al Jazeera",
    "Associated Press",
    "Pentagon",
    "Kremlin",
    "State Department",
];

impl Pool {
    fn names(self) -> &'static [&'static str] {
        match self {
            Pool::Person => PERSONS,
            Pool::Group => GROUPS,
            Pool::Place => PLACES,
            Pool::Org => ORGS,
            Pool::Weapon => WEAPONS,
            Pool::Vehicle => VEHICLES,
            Pool::Position => POSITIONS,
            Pool::Agency => AGENCIES,
        }
    }
}

struct RoleSpec {
    role: &'static str,
    wh: Interrogative,
    pool: Pool,
    /// Cue phrase with `{X}` for the filler.
    fragment: &'static str,
    /// Text used when the role has no argument (empty: dropped).
    absent: &'static str,
    /// Context-aware question with `{T}` for the trigger.
    question: &'static str,
}

struct EventSpec {
    event_type: &'static str,
    triggers: &'static [&'static str],
    /// Clause skeleton: `{T}` is the trigger, `{role}` a role slot.
    pattern: &'static str,
    roles: &'static [RoleSpec],
}

const fn role(
    role: &'static str,
    wh: Interrogative,
    pool: Pool,
    fragment: &'static str,
    absent: &'static str,
    question: &'static str,
) -> RoleSpec {
    RoleSpec {
        role,
        wh,
        pool,
        fragment,
        absent,
        question,
    }
}

use Interrogative::{What, Where, Who};

const EVENTS: &[EventSpec] = &[
    EventSpec {
        event_type: "Conflict.Attack",
        triggers: &["attack", "raid", "ambush", "assault", "bombing"],
        pattern: "the {T} {attacker} {target} {instrument} {place}",
        roles: &[
            role(
                "attacker",
                Who,
                Pool::Group,
                "by gunmen loyal to {X}",
                "",
                "who were the gunmen in the {T} loyal to",
            ),
            role(
                "target",
                Who,
                Pool::Group,
                "aimed at {X}",
                "",
                "who was the {T} aimed at",
            ),
            role(
                "instrument",
                What,
                Pool::Weapon,
                "as {X} rockets were fired",
                "",
                "what rockets were fired in the {T}",
            ),
            role(
                "place",
                Where,
                Pool::Place,
                "in the town of {X}",
                "",
                "where in the town did the {T} happen",
            ),
        ],
    },
    EventSpec {
        event_type: "Personnel.Start-Position",
        triggers: &["hired", "appointed", "named"],
        pattern: "{person} was {T} {position} {entity} {place}",
        roles: &[
            role(
                "person",
                Who,
                Pool::Person,
                "former banker {X}",
                "an executive",
                "who was the former banker that was {T}",
            ),
            role(
                "position",
                What,
                Pool::Position,
                "to the new post of {X}",
                "",
                "what new post was someone {T} to",
            ),
            role(
                "entity",
                Who,
                Pool::Org,
                "by the board of {X}",
                "",
                "whose board {T} someone",
            ),
            role(
                "place",
                Where,
                Pool::Place,
                "at headquarters in {X}",
                "",
                "where were the headquarters when someone was {T}",
            ),
        ],
    },
    EventSpec {
        event_type: "Justice.Arrest-Jail",
        triggers: &["arrested", "detained", "jailed"],
        pattern: "{person} was {T} {agent} {place}",
        roles: &[
            role(
                "person",
                Who,
                Pool::Person,
                "suspect {X}",
                "a suspect",
                "who was the suspect {T}",
            ),
            role(
                "agent",
                Who,
                Pool::Agency,
                "by officers from {X}",
                "",
                "whose officers {T} someone",
            ),
            role(
                "place",
                Where,
                Pool::Place,
                "at a checkpoint near {X}",
                "",
                "where was the checkpoint when someone was {T}",
            ),
        ],
    },
    EventSpec {
        event_type: "Movement.Transport",
        triggers: &["shipped", "moved", "transported"],
        pattern: "{artifact} was {T} {vehicle} {origin} {destination}",
        roles: &[
            role(
                "artifact",
                Who,
                Pool::Org,
                "cargo owned by {X}",
                "cargo",
                "who owned the cargo that was {T}",
            ),
            role(
                "vehicle",
                What,
                Pool::Vehicle,
                "aboard a {X} aircraft",
                "",
                "what aircraft carried the load that was {T}",
            ),
            role(
                "origin",
                Where,
                Pool::Place,
                "from the port of {X}",
                "",
                "where was the port the load was {T} from",
            ),
            role(
                "destination",
                Where,
                Pool::Place,
                "to the capital {X}",
                "",
                "where was the capital the load was {T} to",
            ),
        ],
    },
    EventSpec {
        event_type: "Business.Declare-Bankruptcy",
        triggers: &["bankruptcy", "insolvency"],
        pattern: "{org} filed for {T} {place}",
        roles: &[
            role(
                "org",
                Who,
                Pool::Org,
                "the struggling carrier {X}",
                "a carrier",
                "who was the struggling carrier that filed for {T}",
            ),
            role(
                "place",
                Where,
                Pool::Place,
                "in a court in {X}",
                "",
                "where was the court for the {T}",
            ),
        ],
    },
    EventSpec {
        event_type: "Life.Die",
        triggers: &["killed", "slain", "shot"],
        pattern: "{victim} was {T} {agent} {instrument} {place}",
        roles: &[
            role(
                "victim",
                Who,
                Pool::Person,
                "soldier {X}",
                "a soldier",
                "who was the soldier {T}",
            ),
            role(
                "agent",
                Who,
                Pool::Group,
                "by militants of {X}",
                "",
                "whose militants {T} someone",
            ),
            role(
                "instrument",
                What,
                Pool::Weapon,
                "with a {X} missile",
                "",
                "what missile was used when someone was {T}",
            ),
            role(
                "place",
                Where,
                Pool::Place,
                "near the border town of {X}",
                "",
                "where was the border town where someone was {T}",
            ),
        ],
    },
];

const LEADS: &[&str] = &["{D} officials said", "{D} reported that"];
const TAILS: &[&str] = &[", according to {D}", ", {D} reported"];

/// Probability that a role is annotated in a generated mention.
const ROLE_PRESENCE: f64 = 0.75;

/// Ontology of the synthetic world.
pub fn synthetic_ontology() -> RoleOntology {
    let mut event_types = BTreeMap::new();
    let mut interrogatives = BTreeMap::new();
    for ev in EVENTS {
        event_types.insert(
            ev.event_type.to_string(),
            ev.roles.iter().map(|r| r.role.to_string()).collect(),
        );
        for r in ev.roles {
            interrogatives.insert(r.role.to_string(), r.wh);
        }
    }
    RoleOntology::new(event_types, interrogatives)
}

/// Access to the world's context-aware question patterns.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticWorld;

impl SyntheticWorld {
    /// Context-aware question for `(event_type, role)` with the trigger
    /// filled in; `None` outside the synthetic world.
    pub fn dynamic_question(&self, event_type: &str, role: &str, trigger: &str) -> Option<String> {
        let ev = EVENTS.iter().find(|e| e.event_type == event_type)?;
        let spec = ev.roles.iter().find(|r| r.role == role)?;
        Some(spec.question.replace("{T}", trigger))
    }

    /// All patterns keyed `"{event_type}/{role}"`.
    pub fn question_bank(&self) -> BTreeMap<String, String> {
        EVENTS
            .iter()
            .flat_map(|ev| {
                ev.roles.iter().map(move |r| {
                    (
                        format!("{}/{}", ev.event_type, r.role),
                        r.question.to_string(),
                    )
                })
            })
            .collect()
    }
}

struct Mention {
    context: String,
    trigger: Trigger,
    event_type: &'static str,
    answers: Vec<(&'static str, String)>,
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn draw(pool: Pool, used: &mut HashSet<&'static str>, rng: &mut ChaCha8Rng) -> &'static str {
    let free: Vec<&'static str> = pool
        .names()
        .iter()
        .copied()
        .filter(|n| !used.contains(n))
        .collect();
    let pick = *free.choose(rng).expect("pools are larger than any mention");
    used.insert(pick);
    pick
}

fn generate_mention(ev: &'static EventSpec, rng: &mut ChaCha8Rng) -> Mention {
    let trigger = *ev.triggers.choose(rng).expect("non-empty triggers");
    let mut present: Vec<bool> = ev
        .roles
        .iter()
        .map(|_| rng.gen_bool(ROLE_PRESENCE))
        .collect();
    if !present.iter().any(|&p| p) {
        let i = rng.gen_range(0..present.len());
        present[i] = true;
    }
    let mut used = HashSet::new();
    let mut answers = Vec::new();
    let mut clause = ev.pattern.replace("{T}", trigger);
    for (spec, &is_present) in ev.roles.iter().zip(&present) {
        let slot = format!("{{{}}}", spec.role);
        let text = if is_present {
            let filler = draw(spec.pool, &mut used, rng);
            answers.push((spec.role, filler.to_string()));
            spec.fragment.replace("{X}", filler)
        } else {
            spec.absent.to_string()
        };
        clause = clause.replace(&slot, &text);
    }
    let distractor = *SOURCES.choose(rng).expect("non-empty sources");
    let sentence = if rng.gen_bool(0.5) {
        let lead = LEADS.choose(rng).unwrap().replace("{D}", distractor);
        format!("{lead} {}", lowercase_first(&clause))
    } else {
        let tail = TAILS.choose(rng).unwrap().replace("{D}", distractor);
        format!("{clause}{tail}")
    };
    let sentence = capitalize_first(&sentence.split_whitespace().collect::<Vec<_>>().join(" "));
    let sentence = format!("{}.", sentence.replace(" ,", ","));

    let (start, end) = locate_word(&sentence, trigger).expect("trigger is in the clause");
    Mention {
        context: sentence,
        trigger: Trigger {
            text: trigger.to_string(),
            start,
            end,
        },
        event_type: ev.event_type,
        answers,
    }
}

/// Character span of the first whole-word occurrence of `word`.
fn locate_word(text: &str, word: &str) -> Option<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let target: Vec<char> = word.chars().collect();
    let n = target.len();
    if n == 0 {
        return None;
    }
    (0..chars.len().saturating_sub(n - 1)).find_map(|i| {
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + n == chars.len() || !chars[i + n].is_alphanumeric();
        (before_ok && after_ok && chars[i..i + n] == target[..]).then_some((i, i + n))
    })
}

fn split_for(rng: &mut ChaCha8Rng) -> Split {
    let u: f64 = rng.gen();
    if u < 0.7 {
        Split::Train
    } else if u < 0.8 {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Generates `n_instances` answerable instances; a pure function of
/// `(seed, n_instances, ontology)`. Event types of `ontology` that the
/// synthetic world does not know are ignored; roles it does not list are
/// dropped from the templates.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_instances: usize,
    ontology: &RoleOntology,
) -> Result<Corpus, CorpusError> {
    if n_instances == 0 {
        return Err(CorpusError::Ontology("n_instances must be positive".into()));
    }
    let events: Vec<&'static EventSpec> = EVENTS
        .iter()
        .filter(|ev| ontology.roles(ev.event_type).is_some())
        .collect();
    if events.is_empty() {
        return Err(CorpusError::Ontology(
            "ontology shares no event type with the synthetic world".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n_instances);
    let mut mention_no = 0usize;
    while instances.len() < n_instances {
        let ev = *events.choose(&mut rng).expect("non-empty");
        let mention = generate_mention(ev, &mut rng);
        let split = split_for(&mut rng);
        let allowed = ontology.roles(ev.event_type).unwrap_or_default();
        for (role, answer) in mention.answers {
            if instances.len() == n_instances {
                break;
            }
            if !allowed.iter().any(|r| r == role) {
                continue;
            }
            instances.push(EventInstance {
                id: format!("syn-{mention_no:05}-{role}"),
                context: mention.context.clone(),
                trigger: mention.trigger.clone(),
                event_type: mention.event_type.to_string(),
                role: role.to_string(),
                gold_answers: vec![answer],
                split,
                source: Source::Synthetic,
            });
        }
        mention_no += 1;
    }
    Corpus::new(
        instances,
        ontology.clone(),
        CorpusMetadata {
            source: "synthetic".into(),
            seed: Some(seed),
        },
    )
}
