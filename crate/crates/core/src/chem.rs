use std::fmt;

use serde::{Deserialize, Serialize};

/// Interaction feature carried by ligand atoms and pharmacophore points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Aromatic,
    Donor,
    Acceptor,
    Hydrophobic,
    Ring,
}

impl Feature {
    pub const ALL: [Feature; 5] =
        [Feature::Aromatic, Feature::Donor, Feature::Acceptor, Feature::Hydrophobic, Feature::Ring];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Aromatic => "aromatic",
            Feature::Donor => "donor",
            Feature::Acceptor => "acceptor",
            Feature::Hydrophobic => "hydrophobic",
            Feature::Ring => "ring",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Element symbols with a dedicated one-hot slot; everything else shares the last slot.
pub const ELEMENTS: [&str; 9] = ["C", "N", "O", "S", "F", "Cl", "Br", "P", "I"];

pub fn element_slot(element: &str) -> usize {
    ELEMENTS.iter().position(|e| *e == element).unwrap_or(ELEMENTS.len())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub element: String,
    #[serde(default)]
    pub features: Vec<Feature>,
}

impl Atom {
    pub fn new(element: &str, features: &[Feature]) -> Self {
        let mut features = features.to_vec();
        features.sort();
        Atom { element: element.to_string(), features }
    }

    pub fn is_heavy(&self) -> bool {
        self.element != "H"
    }

    /// Stable text label used by canonical forms.
    pub fn label(&self) -> String {
        let mut s = self.element.clone();
        for f in &self.features {
            s.push('.');
            s.push_str(f.name());
        }
        s
    }
}
