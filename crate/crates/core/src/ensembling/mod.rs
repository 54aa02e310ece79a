//! Ensembles of trained taggers with uniform token-level averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{TokenDistribution, TokenSequence};
use crate::error::{Error, Result};
use crate::taggers::{load_params, ArMode, ModelType, TaggerParams};

/// An ensemble of K taggers sharing one label vocabulary.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<TaggerParams>,
}

impl Ensemble {
    pub fn new(members: Vec<TaggerParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        let v = members[0].label_dim();
        if members.iter().any(|m| m.label_dim() != v) {
            return Err(Error::invalid("ensemble members disagree on label dimension"));
        }
        Ok(Ensemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[TaggerParams] {
        &self.members
    }

    pub fn label_dim(&self) -> usize {
        self.members[0].label_dim()
    }

    /// Uniform mixture of member token-level distributions for one sequence.
    /// CRF members contribute forward-backward marginals, IID members softmax
    /// outputs, AR members teacher-forced (`Gold`) or free-running (`Decode`)
    /// distributions.
    pub fn marginals(
        &self,
        tokens: &[usize],
        gold: Option<&[usize]>,
        ar_mode: ArMode,
    ) -> Result<Vec<TokenDistribution>> {
        let mut per_member = Vec::with_capacity(self.members.len());
        for m in &self.members {
            per_member.push(m.marginals(tokens, gold, ar_mode)?);
        }
        (0..tokens.len())
            .map(|t| {
                let dists: Vec<&TokenDistribution> =
                    per_member.iter().map(|dists| &dists[t]).collect();
                mixture_refs(&dists)
            })
            .collect()
    }

    /// Per-position argmax of the mixture (free-running for AR members).
    /// Ties resolve to the lowest label index.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let marginals = self.marginals(tokens, None, ArMode::Decode)?;
        Ok(marginals.iter().map(|d| d.argmax()).collect())
    }
}

/// Convenience wrappers matching the operation-level API.
pub fn ensemble_marginals(
    ens: &Ensemble,
    seq: &TokenSequence,
    ar_mode: ArMode,
) -> Result<Vec<TokenDistribution>> {
    ens.marginals(&seq.tokens, Some(&seq.gold), ar_mode)
}

pub fn ensemble_predict(ens: &Ensemble, tokens: &[usize]) -> Result<Vec<usize>> {
    ens.predict(tokens)
}

/// Elementwise arithmetic mean of same-dimension distributions.
pub fn mixture(dists: &[TokenDistribution]) -> Result<TokenDistribution> {
    let refs: Vec<&TokenDistribution> = dists.iter().collect();
    mixture_refs(&refs)
}

fn mixture_refs(dists: &[&TokenDistribution]) -> Result<TokenDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::invalid("mixture of zero distributions"))?;
    let v = first.dim();
    if dists.iter().any(|d| d.dim() != v) {
        return Err(Error::invalid("mixture inputs disagree on dimension"));
    }
    let k = dists.len() as f64;
    let probs: Vec<f64> = (0..v)
        .map(|y| dists.iter().map(|d| d.prob(y)).sum::<f64>() / k)
        .collect();
    TokenDistribution::new(probs)
}

/// One entry of an ensemble manifest, in seed order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_type: ModelType,
    pub path: String,
}

/// Manifest file: JSON list of member param files plus model types.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<ManifestEntry>,
}

impl EnsembleManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads manifest members with 1-based ids in `subset`, in manifest (seed)
/// order, so the k-member subset `{1..k}` is always a prefix of `{1..k+1}`.
/// Relative member paths resolve against the manifest's directory.
pub fn build_ensemble(manifest_path: &Path, subset: &[usize]) -> Result<Ensemble> {
    let manifest = EnsembleManifest::read(manifest_path)?;
    if subset.is_empty() {
        return Err(Error::invalid("empty ensemble subset"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut ordered: Vec<usize> = subset.to_vec();
    ordered.sort_unstable();
    ordered.dedup();
    let mut members = Vec::with_capacity(ordered.len());
    let mut dims: Option<(usize, usize)> = None;
    for id in ordered {
        if id == 0 || id > manifest.members.len() {
            return Err(Error::invalid(format!(
                "member id {id} out of range 1..={}",
                manifest.members.len()
            )));
        }
        let entry = &manifest.members[id - 1];
        let path = base.join(&entry.path);
        let params = load_params(&path)?;
        if params.model_type() != entry.model_type {
            return Err(Error::invalid(format!(
                "member {id}: manifest says {}, file holds {}",
                entry.model_type.as_str(),
                params.model_type().as_str()
            )));
        }
        let d = (params.obs_vocab_size(), params.label_dim());
        if let Some(expect) = dims {
            if d != expect {
                return Err(Error::invalid(format!(
                    "member {id}: vocabulary mismatch {d:?} vs {expect:?}"
                )));
            }
        } else {
            dims = Some(d);
        }
        members.push(params);
    }
    Ensemble::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taggers::{save_params, IidParams};

    fn dist(probs: &[f64]) -> TokenDistribution {
        TokenDistribution::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn mixture_is_the_arithmetic_mean() {
        let m = mixture(&[dist(&[0.8, 0.2]), dist(&[0.6, 0.4])]).unwrap();
        assert!((m.prob(0) - 0.7).abs() < 1e-15);
        assert!((m.prob(1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mixture_of_identical_inputs_is_identity() {
        let d = dist(&[0.25, 0.5, 0.25]);
        let m = mixture(&[d.clone(), d.clone(), d.clone()]).unwrap();
        for (a, b) in m.probs().iter().zip(d.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_rejects_dimension_mismatch_and_empty() {
        assert!(mixture(&[dist(&[0.5, 0.5]), dist(&[0.3, 0.3, 0.4])]).is_err());
        assert!(mixture(&[]).is_err());
    }

    #[test]
    fn singleton_ensemble_matches_member() {
        let mut p = IidParams::zeros(3, 2);
        p.emission.row_mut(0).copy_from_slice(&[1.0, -1.0]);
        p.emission.row_mut(1).copy_from_slice(&[-2.0, 0.5]);
        let member = TaggerParams::Iid(p.clone());
        let ens = Ensemble::new(vec![member.clone()]).unwrap();
        let tokens = vec![0, 1, 2];
        let ens_m = ens.marginals(&tokens, None, ArMode::Decode).unwrap();
        let solo = member.marginals(&tokens, None, ArMode::Decode).unwrap();
        for (a, b) in ens_m.iter().zip(&solo) {
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert_eq!(ens.predict(&tokens).unwrap(), member.decode(&tokens).unwrap());
    }

    #[test]
    fn opposed_members_tie_break_to_lower_index() {
        let mut a = IidParams::zeros(1, 2);
        a.emission.row_mut(0).copy_from_slice(&[2.0, -2.0]);
        let mut b = IidParams::zeros(1, 2);
        b.emission.row_mut(0).copy_from_slice(&[-2.0, 2.0]);
        let ens = Ensemble::new(vec![TaggerParams::Iid(a), TaggerParams::Iid(b)]).unwrap();
        assert_eq!(ens.predict(&[0]).unwrap(), vec![0]);
    }

    #[test]
    fn predict_matches_marginal_argmax() {
        let mut a = IidParams::zeros(4, 3);
        let mut b = IidParams::zeros(4, 3);
        for r in 0..4 {
            for c in 0..3 {
                a.emission.set(r, c, ((r * 3 + c) as f64 * 0.7).sin());
                b.emission.set(r, c, ((r * 3 + c) as f64 * 1.3).cos());
            }
        }
        let ens = Ensemble::new(vec![TaggerParams::Iid(a), TaggerParams::Iid(b)]).unwrap();
        let tokens = vec![0, 1, 2, 3, 1];
        let preds = ens.predict(&tokens).unwrap();
        let marg = ens.marginals(&tokens, None, ArMode::Decode).unwrap();
        let via_marg: Vec<usize> = marg.iter().map(|d| d.argmax()).collect();
        assert_eq!(preds, via_marg);
    }

    #[test]
    fn manifest_subset_prefix_property() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..4 {
            let mut p = IidParams::zeros(3, 2);
            p.emission.set(0, 0, i as f64);
            let path = dir.path().join(format!("member_{i}.bin"));
            save_params(&TaggerParams::Iid(p), &path).unwrap();
            entries.push(ManifestEntry {
                model_type: ModelType::Iid,
                path: format!("member_{i}.bin"),
            });
        }
        let manifest_path = dir.path().join("ensemble.json");
        EnsembleManifest { members: entries }.write(&manifest_path).unwrap();

        let e3 = build_ensemble(&manifest_path, &[1, 2, 3]).unwrap();
        let e4 = build_ensemble(&manifest_path, &[1, 2, 3, 4]).unwrap();
        assert_eq!(e3.members(), &e4.members()[..3]);
        assert!(build_ensemble(&manifest_path, &[]).is_err());
        assert!(build_ensemble(&manifest_path, &[5]).is_err());
    }

    #[test]
    fn manifest_detects_vocab_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = TaggerParams::Iid(IidParams::zeros(3, 2));
        let b = TaggerParams::Iid(IidParams::zeros(3, 4));
        save_params(&a, &dir.path().join("a.bin")).unwrap();
        save_params(&b, &dir.path().join("b.bin")).unwrap();
        let manifest_path = dir.path().join("ensemble.json");
        EnsembleManifest {
            members: vec![
                ManifestEntry {
                    model_type: ModelType::Iid,
                    path: "a.bin".into(),
                },
                ManifestEntry {
                    model_type: ModelType::Iid,
                    path: "b.bin".into(),
                },
            ],
        }
        .write(&manifest_path)
        .unwrap();
        assert!(build_ensemble(&manifest_path, &[1, 2]).is_err());
    }
}
