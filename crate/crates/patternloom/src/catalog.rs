//! The 7x6 pattern matrix as data: cognitive functions, topology
//! archetypes, 28 named patterns, 14 empty cells, and the queries that
//! verify the matrix's count and orthogonality properties.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// WHAT an agent capability does; one axis of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CognitiveFunction {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
}

/// HOW a capability is structurally wired; the other axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopologyArchetype {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl CognitiveFunction {
    pub const ALL: [CognitiveFunction; 7] = [
        CognitiveFunction::C1,
        CognitiveFunction::C2,
        CognitiveFunction::C3,
        CognitiveFunction::C4,
        CognitiveFunction::C5,
        CognitiveFunction::C6,
        CognitiveFunction::C7,
    ];
}

impl TopologyArchetype {
    pub const ALL: [TopologyArchetype; 6] = [
        TopologyArchetype::T1,
        TopologyArchetype::T2,
        TopologyArchetype::T3,
        TopologyArchetype::T4,
        TopologyArchetype::T5,
        TopologyArchetype::T6,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TopologyArchetype::T1 => "Chain",
            TopologyArchetype::T2 => "Route",
            TopologyArchetype::T3 => "Parallel",
            TopologyArchetype::T4 => "Orchestrate",
            TopologyArchetype::T5 => "Loop",
            TopologyArchetype::T6 => "Hierarchy",
        }
    }
}

impl fmt::Display for CognitiveFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for TopologyArchetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for CognitiveFunction {
    type Err = CatalogError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CognitiveFunction::ALL
            .iter()
            .copied()
            .find(|c| format!("{c:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| CatalogError::BadAxis(s.to_string()))
    }
}

impl FromStr for TopologyArchetype {
    type Err = CatalogError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopologyArchetype::ALL
            .iter()
            .copied()
            .find(|t| format!("{t:?}").eq_ignore_ascii_case(s) || t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CatalogError::BadAxis(s.to_string()))
    }
}

pub type PatternCoordinate = (CognitiveFunction, TopologyArchetype);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionInfo {
    pub id: CognitiveFunction,
    pub name: String,
    pub core_question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyInfo {
    pub id: TopologyArchetype,
    pub name: String,
    pub structure: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Classification {
    Foundational,
    Conditional,
    #[default]
    Unclassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Named {
        name: String,
        original: bool,
        synopsis: String,
    },
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub coordinate: PatternCoordinate,
    pub status: CellStatus,
    pub classification: Classification,
    pub executable: bool,
}

impl PatternEntry {
    pub fn name(&self) -> Option<&str> {
        match &self.status {
            CellStatus::Named { name, .. } => Some(name),
            CellStatus::Empty => None,
        }
    }

    pub fn is_named(&self) -> bool {
        matches!(self.status, CellStatus::Named { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    /// Cognitive functions with a named entry, per topology column.
    pub per_topology: BTreeMap<TopologyArchetype, Vec<CognitiveFunction>>,
    /// Topologies with a named entry, per function row.
    pub per_function: BTreeMap<CognitiveFunction, Vec<TopologyArchetype>>,
    pub named: usize,
    pub empty: usize,
    pub original: usize,
    pub fill_ratio: f64,
    /// Topologies serving fewer than 2 functions, functions served by
    /// fewer than 2 topologies.
    pub thin_topologies: Vec<TopologyArchetype>,
    pub thin_functions: Vec<CognitiveFunction>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown axis value {0:?}")]
    BadAxis(String),
    #[error("catalog data invalid: {0}")]
    Invalid(String),
    #[error("catalog parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("catalog io error: {0}")]
    Io(#[from] std::io::Error),
}

// Raw file schema.
#[derive(Deserialize)]
struct RawCatalog {
    functions: Vec<FunctionInfo>,
    topologies: Vec<TopologyInfo>,
    cells: Vec<RawCell>,
}

#[derive(Deserialize)]
struct RawCell {
    function: CognitiveFunction,
    topology: TopologyArchetype,
    name: Option<String>,
    #[serde(default)]
    original: bool,
    synopsis: Option<String>,
    #[serde(default)]
    classification: Option<Classification>,
    #[serde(default)]
    executable: bool,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub functions: Vec<FunctionInfo>,
    pub topologies: Vec<TopologyInfo>,
    entries: BTreeMap<PatternCoordinate, PatternEntry>,
}

pub const DEFAULT_CATALOG_JSON: &str = include_str!("../data/catalog.json");

impl Catalog {
    /// The built-in matrix data.
    pub fn builtin() -> Catalog {
        Catalog::from_json(DEFAULT_CATALOG_JSON).expect("built-in catalog is valid")
    }

    /// Load from a path, falling back to the built-in data when `path`
    /// is `None`. The `PATTERNLOOM_CATALOG` env var overrides both.
    pub fn load(path: Option<&std::path::Path>) -> Result<Catalog, CatalogError> {
        if let Ok(env_path) = std::env::var("PATTERNLOOM_CATALOG") {
            let text = std::fs::read_to_string(env_path)?;
            return Catalog::from_json(&text);
        }
        match path {
            Some(p) => Catalog::from_json(&std::fs::read_to_string(p)?),
            None => Ok(Catalog::builtin()),
        }
    }

    pub fn from_json(json: &str) -> Result<Catalog, CatalogError> {
        let raw: RawCatalog = serde_json::from_str(json)?;
        let mut entries = BTreeMap::new();
        for cell in raw.cells {
            let coordinate = (cell.function, cell.topology);
            let status = match cell.name {
                Some(name) => CellStatus::Named {
                    name,
                    original: cell.original,
                    synopsis: cell.synopsis.unwrap_or_default(),
                },
                None => CellStatus::Empty,
            };
            let entry = PatternEntry {
                coordinate,
                status,
                classification: cell.classification.unwrap_or_default(),
                executable: cell.executable,
            };
            if entries.insert(coordinate, entry).is_some() {
                return Err(CatalogError::Invalid(format!(
                    "duplicate cell {}x{}",
                    coordinate.0, coordinate.1
                )));
            }
        }
        let catalog = Catalog { functions: raw.functions, topologies: raw.topologies, entries };
        catalog.check()?;
        Ok(catalog)
    }

    fn check(&self) -> Result<(), CatalogError> {
        if self.functions.len() != 7 {
            return Err(CatalogError::Invalid("expected exactly 7 cognitive functions".into()));
        }
        if self.topologies.len() != 6 {
            return Err(CatalogError::Invalid("expected exactly 6 topologies".into()));
        }
        if self.entries.len() != 42 {
            return Err(CatalogError::Invalid(format!(
                "expected 42 cells, got {}",
                self.entries.len()
            )));
        }
        for entry in self.entries.values() {
            if entry.executable && !entry.is_named() {
                return Err(CatalogError::Invalid(format!(
                    "executable cell {}x{} has no name",
                    entry.coordinate.0, entry.coordinate.1
                )));
            }
        }
        Ok(())
    }

    pub fn lookup(&self, coordinate: PatternCoordinate) -> &PatternEntry {
        // One entry per coordinate is a load-time invariant.
        &self.entries[&coordinate]
    }

    pub fn entries(&self) -> impl Iterator<Item = &PatternEntry> {
        self.entries.values()
    }

    pub fn named_entries(&self) -> impl Iterator<Item = &PatternEntry> {
        self.entries.values().filter(|e| e.is_named())
    }

    pub fn find_by_name(&self, name: &str) -> Option<&PatternEntry> {
        self.named_entries().find(|e| e.name() == Some(name))
    }

    /// All named entries in a topology column.
    pub fn patterns_by_topology(&self, topology: TopologyArchetype) -> Vec<&PatternEntry> {
        self.named_entries().filter(|e| e.coordinate.1 == topology).collect()
    }

    /// All named entries in a function row.
    pub fn patterns_by_function(&self, function: CognitiveFunction) -> Vec<&PatternEntry> {
        self.named_entries().filter(|e| e.coordinate.0 == function).collect()
    }

    pub fn function_info(&self, id: CognitiveFunction) -> &FunctionInfo {
        self.functions.iter().find(|f| f.id == id).expect("checked at load")
    }

    pub fn topology_info(&self, id: TopologyArchetype) -> &TopologyInfo {
        self.topologies.iter().find(|t| t.id == id).expect("checked at load")
    }

    pub fn orthogonality_report(&self) -> OrthogonalityReport {
        let mut per_topology: BTreeMap<TopologyArchetype, Vec<CognitiveFunction>> =
            TopologyArchetype::ALL.iter().map(|t| (*t, Vec::new())).collect();
        let mut per_function: BTreeMap<CognitiveFunction, Vec<TopologyArchetype>> =
            CognitiveFunction::ALL.iter().map(|c| (*c, Vec::new())).collect();
        let mut named = 0;
        let mut original = 0;
        for entry in self.entries.values() {
            if let CellStatus::Named { original: orig, .. } = &entry.status {
                named += 1;
                original += usize::from(*orig);
                per_topology.get_mut(&entry.coordinate.1).unwrap().push(entry.coordinate.0);
                per_function.get_mut(&entry.coordinate.0).unwrap().push(entry.coordinate.1);
            }
        }
        let empty = self.entries.len() - named;
        let thin_topologies =
            per_topology.iter().filter(|(_, v)| v.len() < 2).map(|(t, _)| *t).collect();
        let thin_functions =
            per_function.iter().filter(|(_, v)| v.len() < 2).map(|(c, _)| *c).collect();
        OrthogonalityReport {
            per_topology,
            per_function,
            named,
            empty,
            original,
            fill_ratio: named as f64 / self.entries.len() as f64,
            thin_topologies,
            thin_functions,
        }
    }
}
