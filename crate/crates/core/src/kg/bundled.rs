//! Programmatically authored graphs: the CIFAR-style GKG and the graph that
//! mirrors a synthetic dataset specification.

use super::{KnowledgeGraph, Term, TYPE};
use crate::datasets::SyntheticSpec;
use crate::error::{CoreError, Result};

pub const CIFAR_CLASSES: [&str; 10] = [
    "Airplane",
    "Automobile",
    "Bird",
    "Cat",
    "Deer",
    "Dog",
    "Frog",
    "Horse",
    "Ship",
    "Truck",
];

/// (class, property, individual) facts.
const CIFAR_FACTS: &[(&str, &str, &[&str])] = &[
    // visual
    ("Airplane", "hasBackground", &["air"]),
    ("Airplane", "hasColor", &["white", "gray"]),
    ("Airplane", "hasPart", &["wings", "engine", "tail", "windows"]),
    ("Airplane", "hasShape", &["cross"]),
    ("Airplane", "hasSize", &["large"]),
    ("Airplane", "hasTexture", &["uniform"]),
    ("Automobile", "hasBackground", &["road"]),
    ("Automobile", "hasColor", &["red", "black", "blue"]),
    ("Automobile", "hasPart", &["wheels", "windows", "engine"]),
    ("Automobile", "hasShape", &["rectangular"]),
    ("Automobile", "hasSize", &["medium"]),
    ("Automobile", "hasTexture", &["uniform"]),
    ("Bird", "hasBackground", &["air", "forest"]),
    ("Bird", "hasColor", &["brown", "blue"]),
    ("Bird", "hasPart", &["wings", "eyes", "legs", "feathers", "tail"]),
    ("Bird", "hasShape", &["ellipsoid"]),
    ("Bird", "hasSize", &["small"]),
    ("Bird", "hasTexture", &["dotted"]),
    ("Cat", "hasBackground", &["house"]),
    ("Cat", "hasColor", &["black", "gray", "brown"]),
    ("Cat", "hasPart", &["eyes", "legs", "tail", "fur"]),
    ("Cat", "hasShape", &["ellipsoid"]),
    ("Cat", "hasSize", &["small"]),
    ("Cat", "hasTexture", &["striped"]),
    ("Deer", "hasBackground", &["forest"]),
    ("Deer", "hasColor", &["brown"]),
    ("Deer", "hasPart", &["eyes", "legs", "tail", "fur", "antlers", "hooves"]),
    ("Deer", "hasShape", &["ellipsoid"]),
    ("Deer", "hasSize", &["large"]),
    ("Deer", "hasTexture", &["dotted"]),
    ("Dog", "hasBackground", &["house", "grass"]),
    ("Dog", "hasColor", &["brown", "black"]),
    ("Dog", "hasPart", &["eyes", "legs", "tail", "fur"]),
    ("Dog", "hasShape", &["ellipsoid"]),
    ("Dog", "hasSize", &["medium"]),
    ("Dog", "hasTexture", &["uniform"]),
    ("Frog", "hasBackground", &["water", "forest"]),
    ("Frog", "hasColor", &["green"]),
    ("Frog", "hasPart", &["eyes", "legs"]),
    ("Frog", "hasShape", &["ellipsoid"]),
    ("Frog", "hasSize", &["small"]),
    ("Frog", "hasTexture", &["dotted"]),
    ("Horse", "hasBackground", &["grass"]),
    ("Horse", "hasColor", &["brown", "black", "white"]),
    ("Horse", "hasPart", &["eyes", "legs", "tail", "fur", "hooves"]),
    ("Horse", "hasShape", &["ellipsoid"]),
    ("Horse", "hasSize", &["large"]),
    ("Horse", "hasTexture", &["uniform"]),
    ("Ship", "hasBackground", &["water"]),
    ("Ship", "hasColor", &["white", "gray"]),
    ("Ship", "hasPart", &["hull", "engine", "windows"]),
    ("Ship", "hasShape", &["rectangular"]),
    ("Ship", "hasSize", &["large"]),
    ("Ship", "hasTexture", &["uniform"]),
    ("Truck", "hasBackground", &["road"]),
    ("Truck", "hasColor", &["white", "red"]),
    ("Truck", "hasPart", &["wheels", "windows", "engine"]),
    ("Truck", "hasShape", &["rectangular"]),
    ("Truck", "hasSize", &["large"]),
    ("Truck", "hasTexture", &["uniform"]),
    // functional
    ("Airplane", "hasMovement", &["fly"]),
    ("Airplane", "hasSound", &["roar"]),
    ("Airplane", "hasSpeed", &["fast"]),
    ("Airplane", "hasWeight", &["heavy"]),
    ("Automobile", "hasMovement", &["drive"]),
    ("Automobile", "hasSound", &["vroom"]),
    ("Automobile", "hasSpeed", &["fast"]),
    ("Automobile", "hasWeight", &["heavy"]),
    ("Bird", "hasMovement", &["fly", "walk"]),
    ("Bird", "hasSound", &["chirp"]),
    ("Bird", "hasSpeed", &["fast"]),
    ("Bird", "hasWeight", &["light"]),
    ("Cat", "hasMovement", &["walk", "jump", "climb"]),
    ("Cat", "hasSound", &["meow"]),
    ("Cat", "hasSpeed", &["mediumSpeed"]),
    ("Cat", "hasWeight", &["light"]),
    ("Deer", "hasMovement", &["run", "jump", "walk"]),
    ("Deer", "hasSound", &["bellow"]),
    ("Deer", "hasSpeed", &["fast"]),
    ("Deer", "hasWeight", &["middle"]),
    ("Dog", "hasMovement", &["run", "walk", "swim"]),
    ("Dog", "hasSound", &["bark"]),
    ("Dog", "hasSpeed", &["mediumSpeed"]),
    ("Dog", "hasWeight", &["middle"]),
    ("Frog", "hasMovement", &["jump", "swim"]),
    ("Frog", "hasSound", &["croak"]),
    ("Frog", "hasSpeed", &["slow"]),
    ("Frog", "hasWeight", &["light"]),
    ("Horse", "hasMovement", &["run", "walk"]),
    ("Horse", "hasSound", &["neigh"]),
    ("Horse", "hasSpeed", &["fast"]),
    ("Horse", "hasWeight", &["heavy"]),
    ("Ship", "hasMovement", &["swim"]),
    ("Ship", "hasSound", &["horn"]),
    ("Ship", "hasSpeed", &["slow"]),
    ("Ship", "hasWeight", &["heavy"]),
    ("Truck", "hasMovement", &["drive"]),
    ("Truck", "hasSound", &["horn", "vroom"]),
    ("Truck", "hasSpeed", &["mediumSpeed"]),
    ("Truck", "hasWeight", &["heavy"]),
    // properties outside the three named views
    ("Airplane", "usedFor", &["transport"]),
    ("Automobile", "usedFor", &["transport"]),
    ("Ship", "usedFor", &["transport", "cargo"]),
    ("Truck", "usedFor", &["cargo"]),
    ("Dog", "usedFor", &["companionship"]),
    ("Cat", "usedFor", &["companionship"]),
    ("Horse", "usedFor", &["riding"]),
    ("Airplane", "madeOf", &["metal"]),
    ("Automobile", "madeOf", &["metal"]),
    ("Ship", "madeOf", &["metal"]),
    ("Truck", "madeOf", &["metal"]),
    ("Bird", "hasDiet", &["seeds", "insects"]),
    ("Cat", "hasDiet", &["meat"]),
    ("Deer", "hasDiet", &["plants"]),
    ("Dog", "hasDiet", &["meat"]),
    ("Frog", "hasDiet", &["insects"]),
    ("Horse", "hasDiet", &["plants"]),
    ("Airplane", "hasEnergySource", &["fuel"]),
    ("Automobile", "hasEnergySource", &["fuel"]),
    ("Ship", "hasEnergySource", &["fuel"]),
    ("Truck", "hasEnergySource", &["fuel"]),
    ("Bird", "hasHabitat", &["wild"]),
    ("Cat", "hasHabitat", &["domestic"]),
    ("Deer", "hasHabitat", &["wild"]),
    ("Dog", "hasHabitat", &["domestic"]),
    ("Frog", "hasHabitat", &["wild"]),
    ("Horse", "hasHabitat", &["farm"]),
];

/// Direct parent of every taxonomy node.
const TAXONOMY: &[(&str, &str)] = &[
    ("Machine", "Artifact"),
    ("Vehicle", "Machine"),
    ("MotorVehicle", "Vehicle"),
    ("AirVehicle", "Vehicle"),
    ("LandVehicle", "Vehicle"),
    ("WaterVehicle", "Vehicle"),
    ("Animal", "Organism"),
    ("Vertebrate", "Animal"),
    ("Tetrapod", "Vertebrate"),
    ("Mammal", "Tetrapod"),
    ("Aves", "Tetrapod"),
    ("Amphibian", "Tetrapod"),
    ("Carnivore", "Mammal"),
    ("Herbivore", "Mammal"),
    ("Primate", "Mammal"),
    ("Feline", "Carnivore"),
    ("Canine", "Carnivore"),
    ("Ungulate", "Herbivore"),
    ("Cervid", "Ungulate"),
    ("Equine", "Ungulate"),
    ("Anura", "Amphibian"),
];

/// Most specific taxonomy node of every class, including the target-only
/// Monkey class.
const CLASS_TYPES: &[(&str, &[&str])] = &[
    ("Airplane", &["AirVehicle", "MotorVehicle"]),
    ("Automobile", &["LandVehicle", "MotorVehicle"]),
    ("Bird", &["Aves"]),
    ("Cat", &["Feline"]),
    ("Deer", &["Cervid"]),
    ("Dog", &["Canine"]),
    ("Frog", &["Anura"]),
    ("Horse", &["Equine"]),
    ("Ship", &["WaterVehicle", "MotorVehicle"]),
    ("Truck", &["LandVehicle", "MotorVehicle"]),
    ("Monkey", &["Primate"]),
];

fn ancestors(node: &str) -> Vec<&'static str> {
    let mut out = Vec::new();
    let mut cur = node;
    while let Some(&(_, parent)) = TAXONOMY.iter().find(|(c, _)| *c == cur) {
        out.push(parent);
        cur = parent;
    }
    out
}

/// The bundled CIFAR-style generic knowledge graph.
///
/// Classes carry explicit type triples to every ancestor in the taxonomy
/// (Horse is-a Equine, ..., Mammal, ..., Animal), and taxonomy nodes carry a
/// type triple to their direct parent.
pub fn build_cifar_gkg() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new(CIFAR_CLASSES.iter().map(|c| c.to_string()).collect())
        .expect("bundled class list is valid");
    let mut add = |h: Term, r: &str, t: Term| {
        g.add(h, r, t).expect("bundled triple is valid");
    };
    for (class, leaves) in CLASS_TYPES {
        let mut seen: Vec<&str> = Vec::new();
        for leaf in leaves.iter() {
            for node in std::iter::once(*leaf).chain(ancestors(leaf)) {
                if !seen.contains(&node) {
                    seen.push(node);
                    add(Term::class(*class), TYPE, Term::class(node));
                }
            }
        }
    }
    for (child, parent) in TAXONOMY {
        add(Term::class(*child), TYPE, Term::class(*parent));
    }
    for (class, prop, values) in CIFAR_FACTS {
        for v in values.iter() {
            add(Term::class(*class), prop, Term::individual(*v));
        }
    }
    g
}

/// Root that every synthetic supercategory is typed under.
pub const SYNTHETIC_ROOT: &str = "Object";

/// Graph with one triple per (class, attribute kind, value) plus a two-level
/// taxonomy: class type supercategory, supercategory type root.
pub fn build_synthetic_gkg(spec: &SyntheticSpec) -> Result<KnowledgeGraph> {
    spec.validate()?;
    let names: Vec<String> = spec.classes.iter().map(|c| c.name.clone()).collect();
    let mut g = KnowledgeGraph::new(names)?;
    let mut supers: Vec<String> = Vec::new();
    for c in &spec.classes {
        let missing = |what: &str| CoreError::Config(format!("class {} has no {what}", c.name));
        let head = Term::class(c.name.clone());
        let shape = c.shape.ok_or_else(|| missing("shape"))?;
        let color = c.color.as_ref().ok_or_else(|| missing("color"))?;
        let texture = c.texture.ok_or_else(|| missing("texture"))?;
        let background = c.background.ok_or_else(|| missing("background"))?;
        let sup = c.supercategory.as_ref().ok_or_else(|| missing("supercategory"))?;
        g.add(head.clone(), "hasShape", Term::individual(shape.as_str()))?;
        g.add(head.clone(), "hasColor", Term::individual(color.name.clone()))?;
        g.add(head.clone(), "hasTexture", Term::individual(texture.as_str()))?;
        g.add(head.clone(), "hasBackground", Term::individual(background.as_str()))?;
        g.add(head, TYPE, Term::class(sup.clone()))?;
        if !supers.contains(sup) {
            supers.push(sup.clone());
        }
    }
    for s in supers {
        g.add(Term::class(s), TYPE, Term::class(SYNTHETIC_ROOT))?;
    }
    g.validate()?;
    Ok(g)
}
