//! Condition encoding: `(cell type, perturbation, dosage)` mapped to a
//! fixed-width vector through learned lookup tables.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;

use ndarray::{s, Array1, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::nn::ParameterSet;

/// Width of the concatenated condition embedding.
pub const EMBED_DIM: usize = 64;
/// Width of each of the two lookup tables.
pub const TABLE_DIM: usize = EMBED_DIM / 2;

/// Table indices within [`ParameterSet::embeddings`].
pub const CELL_TYPE_TABLE: usize = 0;
pub const PERTURBATION_TABLE: usize = 1;
pub const DOSAGE_DIRECTION: usize = 2;

/// Perturbation id reserved for unperturbed cells.
pub const CONTROL_ID: usize = 0;
pub const CONTROL_NAME: &str = "control";

/// Identifies one experimental group. Dosage is 0 for genetic perturbations.
#[derive(Debug, Clone, Copy)]
pub struct ConditionKey {
    pub cell_type_id: usize,
    pub perturbation_id: usize,
    pub dosage: f64,
}

impl ConditionKey {
    pub fn new(cell_type_id: usize, perturbation_id: usize, dosage: f64) -> Self {
        Self {
            cell_type_id,
            perturbation_id,
            dosage,
        }
    }

    pub fn is_control(&self) -> bool {
        self.perturbation_id == CONTROL_ID
    }

    fn ord_key(&self) -> (usize, usize, u64) {
        (self.perturbation_id, self.cell_type_id, self.dosage.to_bits())
    }
}

impl PartialEq for ConditionKey {
    fn eq(&self, other: &Self) -> bool {
        self.ord_key() == other.ord_key()
    }
}

impl Eq for ConditionKey {}

impl Hash for ConditionKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.ord_key().hash(state);
    }
}

impl PartialOrd for ConditionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ConditionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.perturbation_id, self.cell_type_id)
            .cmp(&(other.perturbation_id, other.cell_type_id))
            .then(self.dosage.total_cmp(&other.dosage))
    }
}

impl fmt::Display for ConditionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(cell_type={}, perturbation={}, dosage={})",
            self.cell_type_id, self.perturbation_id, self.dosage
        )
    }
}

/// Fixed name ↔ id assignment for cell types and perturbations.
/// Perturbation id 0 is always `control`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub cell_types: Vec<String>,
    pub perturbations: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            cell_types: Vec::new(),
            perturbations: vec![CONTROL_NAME.to_string()],
        }
    }
}

impl Vocabulary {
    pub fn cell_type_id(&self, name: &str) -> Result<usize> {
        self.cell_types
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Vocabulary {
                kind: "cell type",
                name: name.to_string(),
            })
    }

    pub fn perturbation_id(&self, name: &str) -> Result<usize> {
        self.perturbations
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Vocabulary {
                kind: "perturbation",
                name: name.to_string(),
            })
    }

    /// Returns the id for `name`, registering it if new.
    pub fn intern_cell_type(&mut self, name: &str) -> usize {
        intern(&mut self.cell_types, name)
    }

    pub fn intern_perturbation(&mut self, name: &str) -> usize {
        intern(&mut self.perturbations, name)
    }

    pub fn check(&self, key: &ConditionKey) -> Result<()> {
        if key.cell_type_id >= self.cell_types.len() {
            return Err(Error::Vocabulary {
                kind: "cell type id",
                name: key.cell_type_id.to_string(),
            });
        }
        if key.perturbation_id >= self.perturbations.len() {
            return Err(Error::Vocabulary {
                kind: "perturbation id",
                name: key.perturbation_id.to_string(),
            });
        }
        if !(key.dosage.is_finite() && key.dosage >= 0.0) {
            return Err(Error::Input(format!("dosage {} must be finite and >= 0", key.dosage)));
        }
        Ok(())
    }

    /// Text form, one `kind,id,name` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::from("kind,id,name\n");
        for (i, n) in self.cell_types.iter().enumerate() {
            out.push_str(&format!("cell_type,{i},{n}\n"));
        }
        for (i, n) in self.perturbations.iter().enumerate() {
            out.push_str(&format!("perturbation,{i},{n}\n"));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64,
            msg,
        };
        let mut cell_types = Vec::new();
        let mut perturbations = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || (i == 0 && line == "kind,id,name") {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (Some(kind), Some(id), Some(name)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(err(lineno, "expected kind,id,name".into()));
            };
            let id: usize = id
                .parse()
                .map_err(|_| err(lineno, format!("bad id `{id}`")))?;
            let list = match kind {
                "cell_type" => &mut cell_types,
                "perturbation" => &mut perturbations,
                other => return Err(err(lineno, format!("unknown kind `{other}`"))),
            };
            if id != list.len() {
                return Err(err(lineno, format!("ids must be dense and ordered, got {id}")));
            }
            list.push(name.to_string());
        }
        if perturbations.first().map(String::as_str) != Some(CONTROL_NAME) {
            return Err(err(1, "perturbation id 0 must be `control`".into()));
        }
        Ok(Self {
            cell_types,
            perturbations,
        })
    }
}

fn intern(list: &mut Vec<String>, name: &str) -> usize {
    match list.iter().position(|n| n == name) {
        Some(i) => i,
        None => {
            list.push(name.to_string());
            list.len() - 1
        }
    }
}

/// Table shapes `(rows, cols)` to allocate for a vocabulary.
pub fn table_shapes(vocab: &Vocabulary) -> [(usize, usize); 3] {
    [
        (vocab.cell_types.len(), TABLE_DIM),
        (vocab.perturbations.len(), TABLE_DIM),
        (1, EMBED_DIM),
    ]
}

fn check_tables(key: &ConditionKey, tables: &ParameterSet) -> Result<()> {
    if tables.embeddings.len() <= DOSAGE_DIRECTION {
        return Err(Error::State("parameter set carries no condition tables".into()));
    }
    let ct_rows = tables.embeddings[CELL_TYPE_TABLE].value.nrows();
    let p_rows = tables.embeddings[PERTURBATION_TABLE].value.nrows();
    if key.cell_type_id >= ct_rows {
        return Err(Error::Vocabulary {
            kind: "cell type id",
            name: key.cell_type_id.to_string(),
        });
    }
    if key.perturbation_id >= p_rows {
        return Err(Error::Vocabulary {
            kind: "perturbation id",
            name: key.perturbation_id.to_string(),
        });
    }
    Ok(())
}

/// `concat(cell_type[ct], perturbation[p]) + dosage * direction`.
pub fn embed(key: &ConditionKey, tables: &ParameterSet) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(EMBED_DIM);
    embed_into(key, tables, out.view_mut())?;
    Ok(out)
}

pub fn embed_into(
    key: &ConditionKey,
    tables: &ParameterSet,
    mut out: ArrayViewMut1<f64>,
) -> Result<()> {
    check_tables(key, tables)?;
    let e = &tables.embeddings;
    out.slice_mut(s![..TABLE_DIM])
        .assign(&e[CELL_TYPE_TABLE].value.row(key.cell_type_id));
    out.slice_mut(s![TABLE_DIM..])
        .assign(&e[PERTURBATION_TABLE].value.row(key.perturbation_id));
    if key.dosage != 0.0 {
        out.scaled_add(key.dosage, &e[DOSAGE_DIRECTION].value.row(0));
    }
    Ok(())
}

/// Scatters `∂L/∂embedding` into the table gradients.
pub fn embed_backward(
    key: &ConditionKey,
    tables: &mut ParameterSet,
    grad: ArrayView1<f64>,
) -> Result<()> {
    check_tables(key, tables)?;
    let e = &mut tables.embeddings;
    e[CELL_TYPE_TABLE]
        .grad
        .row_mut(key.cell_type_id)
        .scaled_add(1.0, &grad.slice(s![..TABLE_DIM]));
    e[PERTURBATION_TABLE]
        .grad
        .row_mut(key.perturbation_id)
        .scaled_add(1.0, &grad.slice(s![TABLE_DIM..]));
    e[DOSAGE_DIRECTION]
        .grad
        .row_mut(0)
        .scaled_add(key.dosage, &grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::default();
        v.intern_cell_type("K562");
        v.intern_cell_type("A549");
        v.intern_perturbation("GENE_A");
        v.intern_perturbation("GENE_B");
        v
    }

    fn tables(seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = MlpShape {
            input: 2,
            hidden: vec![],
            output: 1,
        };
        ParameterSet::new(&shape, &table_shapes(&vocab()), &mut rng)
    }

    #[test]
    fn same_key_same_vector() {
        let t = tables(1);
        let k = ConditionKey::new(1, 2, 0.5);
        assert_eq!(embed(&k, &t).unwrap(), embed(&k, &t).unwrap());
    }

    #[test]
    fn zero_dosage_is_table_concat() {
        let t = tables(2);
        let v = embed(&ConditionKey::new(0, 1, 0.0), &t).unwrap();
        assert_eq!(v.slice(s![..TABLE_DIM]), t.embeddings[0].value.row(0));
        assert_eq!(v.slice(s![TABLE_DIM..]), t.embeddings[1].value.row(1));
    }

    #[test]
    fn distinct_perturbations_differ() {
        let t = tables(3);
        let a = embed(&ConditionKey::new(0, 1, 0.0), &t).unwrap();
        let b = embed(&ConditionKey::new(0, 2, 0.0), &t).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let t = tables(4);
        let r = embed(&ConditionKey::new(0, 3, 0.0), &t);
        assert!(matches!(r, Err(Error::Vocabulary { .. })));
        assert!(vocab().perturbation_id("GENE_Z").is_err());
    }

    #[test]
    fn backward_reaches_every_table() {
        let mut t = tables(5);
        let k = ConditionKey::new(1, 2, 0.3);
        let g = Array1::from_elem(EMBED_DIM, 1.0);
        embed_backward(&k, &mut t, g.view()).unwrap();
        assert!(t.embeddings[0].grad.row(1).iter().all(|&x| x == 1.0));
        assert!(t.embeddings[0].grad.row(0).iter().all(|&x| x == 0.0));
        assert!(t.embeddings[1].grad.row(2).iter().all(|&x| x == 1.0));
        assert!(t.embeddings[2].grad.iter().all(|&x| x == 0.3));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = vocab();
        let back = Vocabulary::parse(&v.to_text(), Path::new("vocab.csv")).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::parse("kind,id,name\nperturbation,1,x\n", Path::new("v")).is_err());
    }
}
