use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{block_from_recipe, EffectRecipe, EffectSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mcd::{n_predictors, McdIndexTables};

/// Effects and fixed offset of one linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    /// One-based predictor index in `1..=q`.
    pub index: usize,
    /// Constant added to the predictor and never multiplied by a coefficient.
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub effects: Vec<EffectSpec>,
}

/// Which effects act on which of the `q` linear predictors. Predictors that are
/// not listed are held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d: usize,
    pub predictors: Vec<PredictorSpec>,
}

impl ModelSpec {
    pub fn q(&self) -> usize {
        n_predictors(self.d)
    }

    /// Intercept on every predictor.
    pub fn intercepts(d: usize) -> Self {
        Self {
            d,
            predictors: (1..=n_predictors(d))
                .map(|index| PredictorSpec {
                    index,
                    offset: 0.0,
                    effects: vec![EffectSpec::intercept()],
                })
                .collect(),
        }
    }

    /// Spec for the zero-based predictor `j`, if present.
    pub fn predictor(&self, j: usize) -> Option<&PredictorSpec> {
        self.predictors.iter().find(|p| p.index == j + 1)
    }

    pub fn predictor_mut(&mut self, j: usize) -> &mut PredictorSpec {
        if let Some(pos) = self.predictors.iter().position(|p| p.index == j + 1) {
            return &mut self.predictors[pos];
        }
        self.predictors.push(PredictorSpec {
            index: j + 1,
            offset: 0.0,
            effects: Vec::new(),
        });
        self.predictors.sort_by_key(|p| p.index);
        let pos = self.predictors.iter().position(|p| p.index == j + 1).expect("inserted");
        &mut self.predictors[pos]
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serialises");
        crate::digest::sha256_hex(&bytes)
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Spec("response dimension must be positive".into()));
        }
        let q = self.q();
        let mut seen = vec![false; q];
        for p in &self.predictors {
            if p.index == 0 || p.index > q {
                return Err(Error::Spec(format!("predictor index {} outside 1..={q}", p.index)));
            }
            if std::mem::replace(&mut seen[p.index - 1], true) {
                return Err(Error::Spec(format!("predictor {} listed twice", p.index)));
            }
            if !p.offset.is_finite() {
                return Err(Error::Spec(format!("predictor {} has a non-finite offset", p.index)));
            }
            for (a, e) in p.effects.iter().enumerate() {
                if p.effects[..a].iter().any(|o| o == e) {
                    return Err(Error::Spec(format!(
                        "duplicate effect {} on predictor {}",
                        e.label(),
                        p.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Column range of one effect inside its predictor and inside the full `β`.
#[derive(Debug, Clone)]
pub struct EffectSlot {
    pub label: String,
    pub local: Range<usize>,
    pub global: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct PredictorDesign {
    pub x: DMatrix<f64>,
    pub offset: f64,
    pub effects: Vec<EffectSlot>,
    /// Start of this predictor's coefficients in `β`.
    pub beta_offset: usize,
}

impl PredictorDesign {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn cols(&self) -> Range<usize> {
        self.beta_offset..self.beta_offset + self.p()
    }
}

/// One penalty matrix with its position in `β`.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    /// Zero-based predictor index.
    pub predictor: usize,
    pub effect: usize,
    pub cols: Range<usize>,
    pub s: DMatrix<f64>,
    pub rank: usize,
    /// Index into [`DesignAssembly::groups`].
    pub group: usize,
}

/// Penalties sharing one coefficient range (e.g. the two margins of a tensor).
#[derive(Debug, Clone)]
pub struct PenaltyGroup {
    pub cols: Range<usize>,
    pub members: Vec<usize>,
    /// Rank of the summed penalty, fixed by structure.
    pub rank: usize,
}

/// Data-dependent state needed to rebuild the design on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub spec: ModelSpec,
    /// Recipes per zero-based predictor (empty for unlisted predictors).
    pub effects: Vec<Vec<EffectRecipe>>,
}

/// Design matrices, offsets and penalties for all `q` predictors.
#[derive(Debug, Clone)]
pub struct DesignAssembly {
    pub tables: McdIndexTables,
    pub n: usize,
    pub predictors: Vec<PredictorDesign>,
    pub p: usize,
    pub penalties: Vec<PenaltyBlock>,
    pub groups: Vec<PenaltyGroup>,
    pub recipe: ModelRecipe,
}

impl ModelRecipe {
    pub fn from_data(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        if data.d() != spec.d {
            return Err(Error::Spec(format!(
                "spec is for d = {} but the data have d = {}",
                spec.d,
                data.d()
            )));
        }
        let effects = (0..spec.q())
            .map(|j| match spec.predictor(j) {
                Some(p) => p
                    .effects
                    .iter()
                    .map(|e| EffectRecipe::from_data(e, data))
                    .collect::<Result<Vec<_>>>(),
                None => Ok(Vec::new()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            effects,
        })
    }

    /// Evaluates every effect on `data` with the stored transforms.
    pub fn assemble(&self, data: &Dataset) -> Result<DesignAssembly> {
        let n = data.n();
        let q = self.spec.q();
        let mut predictors = Vec::with_capacity(q);
        let mut penalties = Vec::new();
        let mut groups = Vec::new();
        let mut beta_offset = 0;
        for j in 0..q {
            let offset = self.spec.predictor(j).map_or(0.0, |p| p.offset);
            let blocks = self.effects[j]
                .iter()
                .map(|r| block_from_recipe(r.clone(), data))
                .collect::<Result<Vec<_>>>()?;
            let pj: usize = blocks.iter().map(|b| b.p()).sum();
            let mut x = DMatrix::zeros(n, pj);
            let mut slots = Vec::with_capacity(blocks.len());
            let mut c0 = 0;
            for (e, b) in blocks.into_iter().enumerate() {
                let w = b.p();
                x.view_mut((0, c0), (n, w)).copy_from(&b.design);
                let global = beta_offset + c0..beta_offset + c0 + w;
                if !b.penalties.is_empty() {
                    let group = groups.len();
                    let mut members = Vec::new();
                    for (s, rank) in b.penalties.into_iter().zip(b.ranks) {
                        members.push(penalties.len());
                        penalties.push(PenaltyBlock {
                            predictor: j,
                            effect: e,
                            cols: global.clone(),
                            s,
                            rank,
                            group,
                        });
                    }
                    groups.push(PenaltyGroup {
                        cols: global.clone(),
                        members,
                        rank: b.rank,
                    });
                }
                slots.push(EffectSlot {
                    label: b.recipe.spec.label(),
                    local: c0..c0 + w,
                    global,
                });
                c0 += w;
            }
            predictors.push(PredictorDesign {
                x,
                offset,
                effects: slots,
                beta_offset,
            });
            beta_offset += pj;
        }
        Ok(DesignAssembly {
            tables: McdIndexTables::new(self.spec.d),
            n,
            predictors,
            p: beta_offset,
            penalties,
            groups,
            recipe: self.clone(),
        })
    }
}

/// Builds all effects of `spec` on `data`.
pub fn assemble_design(spec: &ModelSpec, data: &Dataset) -> Result<DesignAssembly> {
    ModelRecipe::from_data(spec, data)?.assemble(data)
}

impl DesignAssembly {
    pub fn q(&self) -> usize {
        self.tables.q
    }

    /// Penalty null-space dimension `M_p`.
    pub fn null_space_dim(&self) -> usize {
        self.p - self.groups.iter().map(|g| g.rank).sum::<usize>()
    }

    /// `n×q` predictor values `η = Xβ + offset`.
    pub fn eta(&self, beta: &[f64]) -> DMatrix<f64> {
        assert_eq!(beta.len(), self.p, "coefficient length mismatch");
        let mut out = DMatrix::zeros(self.n, self.q());
        for (j, pd) in self.predictors.iter().enumerate() {
            let mut col = out.column_mut(j);
            col.fill(pd.offset);
            if pd.p() > 0 {
                let b = nalgebra::DVectorView::from_slice(&beta[pd.cols()], pd.p());
                col.gemv(1.0, &pd.x, &b, 1.0);
            }
        }
        out
    }

    /// `Σ_u λ_u S_u` embedded in a `p×p` matrix.
    pub fn penalty_matrix(&self, lambda: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.p, self.p);
        for (pb, l) in self.penalties.iter().zip(lambda) {
            let r = pb.cols.start;
            let w = pb.cols.len();
            let mut v = s.view_mut((r, r), (w, w));
            v += &pb.s * *l;
        }
        s
    }

    /// Coefficients held by the zero-based predictor `j`.
    pub fn predictor_cols(&self, j: usize) -> Range<usize> {
        self.predictors[j].cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticScenario};

    fn data() -> Dataset {
        let sc: SyntheticScenario = serde_json::from_str(r#"{"d":2,"n":300,"seed":3}"#).unwrap();
        generate_synthetic(&sc).unwrap().dataset
    }

    #[test]
    fn intercept_only_assembly() {
        let ds = data();
        let a = assemble_design(&ModelSpec::intercepts(2), &ds).unwrap();
        assert_eq!(a.predictors.len(), 5);
        assert_eq!(a.p, 5);
        assert!(a.penalties.is_empty());
        for pd in &a.predictors {
            assert_eq!(pd.p(), 1);
            assert!(pd.x.iter().all(|v| *v == 1.0));
        }
        assert_eq!(a.null_space_dim(), 5);
    }

    #[test]
    fn offset_only_predictor() {
        let ds = data();
        let mut spec = ModelSpec::intercepts(2);
        spec.predictor_mut(4).offset = 0.7;
        spec.predictor_mut(2).effects.clear();
        spec.predictor_mut(2).offset = -0.3;
        let a = assemble_design(&spec, &ds).unwrap();
        assert_eq!(a.predictors[2].p(), 0);
        let beta = vec![0.0, 0.0, 0.25, 0.0];
        let eta = a.eta(&beta);
        for i in 0..ds.n() {
            assert_eq!(eta[(i, 2)], -0.3);
            assert_eq!(eta[(i, 3)], 0.25);
            assert_eq!(eta[(i, 4)], 0.7);
        }
    }

    #[test]
    fn duplicate_effect_rejected() {
        let ds = data();
        let mut spec = ModelSpec::intercepts(2);
        spec.predictor_mut(0).effects.push(EffectSpec::cr("tod", 6));
        spec.predictor_mut(0).effects.push(EffectSpec::cr("tod", 6));
        assert!(matches!(assemble_design(&spec, &ds), Err(Error::Spec(_))));
    }

    #[test]
    fn column_bookkeeping() {
        let ds = data();
        let mut spec = ModelSpec { d: 2, predictors: vec![] };
        let effects = vec![
            EffectSpec::intercept(),
            EffectSpec::trend("t"),
            EffectSpec::factor("dow", false),
            EffectSpec::cr("doy", 6),
            EffectSpec::factor_smooth("tod", "dow", 5),
            EffectSpec::tensor("temp_1", "tod", 4, 4),
            EffectSpec::varying("wsp100_1", "wcap", 5),
        ];
        spec.predictor_mut(0).effects = effects.clone();
        let a = assemble_design(&spec, &ds).unwrap();
        let levels = ds.categorical("dow").unwrap().0.len();
        let expected = 1 + 2 + (levels - 1) + 5 + 4 * levels + 15 + 5;
        assert_eq!(a.predictors[0].p(), expected);
        assert_eq!(a.p, expected);
        // one penalty each for cr, fs, vc and two for the tensor, in three+1 groups
        assert_eq!(a.penalties.len(), 5);
        assert_eq!(a.groups.len(), 4);
        let last = a.predictors[0].effects.last().unwrap();
        assert_eq!(last.global.end, expected);
    }

    #[test]
    fn prediction_reproduces_training_rows() {
        let ds = data();
        let mut spec = ModelSpec::intercepts(2);
        spec.predictor_mut(2).effects.push(EffectSpec::cr("tod", 8));
        spec.predictor_mut(4).effects.push(EffectSpec::tensor("temp_2", "tod", 4, 4));
        let recipe = ModelRecipe::from_data(&spec, &ds).unwrap();
        let json = serde_json::to_string(&recipe).unwrap();
        let back: ModelRecipe = serde_json::from_str(&json).unwrap();
        let a = recipe.assemble(&ds).unwrap();
        let b = back.assemble(&ds).unwrap();
        for (x, y) in a.predictors.iter().zip(&b.predictors) {
            assert_eq!(x.x, y.x);
        }
    }
}
