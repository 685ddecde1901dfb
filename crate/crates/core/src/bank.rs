//! Sub-model banks and random layer sampling.
//!
//! A [`SubModelBank`] keeps `M` independent parameter sets for every
//! samplable layer position. A [`SamplingMask`] picks one of them per
//! position, and the chosen layers, together with the shared ones, form a
//! sampled model. With `L` samplable positions there are `M^L` sampled
//! models, all assembled on demand from `M` sub-models' worth of weights.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{init_params, layer_forward, Architecture, ParamSet, ParamVars};
use crate::tensor::Tensor;

/// Parameters held at one layer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionParams {
    /// Parameter-free layer.
    Stateless,
    Shared(ParamSet),
    /// One set per sub-model.
    Bank(Vec<ParamSet>),
}

/// Sub-model index chosen at each samplable position.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SamplingMask(pub Vec<usize>);

impl SamplingMask {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModelBank {
    architecture: Architecture,
    m: usize,
    positions: Vec<PositionParams>,
}

#[derive(Debug, Clone)]
enum PositionVars {
    Stateless,
    Shared(ParamVars),
    Bank(Vec<ParamVars>),
}

/// Every parameter of a bank bound onto one tape.
#[derive(Debug, Clone)]
pub struct BankVars {
    positions: Vec<PositionVars>,
}

impl BankVars {
    /// Handles in the same order as [`SubModelBank::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.positions {
            match p {
                PositionVars::Stateless => {}
                PositionVars::Shared(v) => out.extend(v.vars()),
                PositionVars::Bank(sets) => {
                    for v in sets {
                        out.extend(v.vars());
                    }
                }
            }
        }
        out
    }

    /// Handles of the shared set at `position`, or of sub-model `m`'s set.
    pub fn position(&self, position: usize, m: usize) -> Option<ParamVars> {
        match self.positions.get(position)? {
            PositionVars::Stateless => None,
            PositionVars::Shared(v) => Some(*v),
            PositionVars::Bank(sets) => sets.get(m).copied(),
        }
    }
}

/// Class decisions and averaged probabilities from defended inference.
#[derive(Debug, Clone, PartialEq)]
pub struct DefendedPrediction {
    pub classes: Vec<usize>,
    pub probs: Tensor,
}

impl SubModelBank {
    /// Draws `M` independent initializations for every samplable position.
    pub fn build<R: Rng + ?Sized>(architecture: Architecture, m: usize, rng: &mut R) -> Result<Self> {
        if m < 1 {
            return Err(Error::contract("a bank needs at least one sub-model"));
        }
        architecture.validate()?;
        let mut positions = Vec::with_capacity(architecture.layers.len());
        for slot in &architecture.layers {
            let params = if !slot.spec.is_parameterized() {
                PositionParams::Stateless
            } else if slot.is_samplable() {
                PositionParams::Bank(
                    (0..m)
                        .map(|_| init_params(&slot.spec, rng))
                        .collect::<Result<_>>()?,
                )
            } else {
                PositionParams::Shared(init_params(&slot.spec, rng)?)
            };
            positions.push(params);
        }
        Ok(Self {
            architecture,
            m,
            positions,
        })
    }

    /// Re-checks structural invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::contract("a bank needs at least one sub-model"));
        }
        self.architecture.validate()?;
        if self.positions.len() != self.architecture.layers.len() {
            return Err(Error::contract(format!(
                "{} parameter positions for {} layers",
                self.positions.len(),
                self.architecture.layers.len()
            )));
        }
        for (i, (slot, params)) in self.architecture.layers.iter().zip(&self.positions).enumerate() {
            let ok = match params {
                PositionParams::Stateless => !slot.spec.is_parameterized(),
                PositionParams::Shared(p) => {
                    slot.spec.is_parameterized()
                        && !slot.is_samplable()
                        && p.check_against(&slot.spec).is_ok()
                }
                PositionParams::Bank(sets) => {
                    slot.is_samplable()
                        && sets.len() == self.m
                        && sets.iter().all(|p| p.check_against(&slot.spec).is_ok())
                }
            };
            if !ok {
                return Err(Error::contract(format!(
                    "parameters at layer {i} do not match its spec"
                )));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    /// Number of sub-models `M`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of samplable positions `L`.
    pub fn samplable_count(&self) -> usize {
        self.positions
            .iter()
            .filter(|p| matches!(p, PositionParams::Bank(_)))
            .count()
    }

    pub fn positions(&self) -> &[PositionParams] {
        &self.positions
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.output_classes().unwrap_or(0)
    }

    /// `M^L`, or `None` on overflow.
    pub fn num_sampled_models(&self) -> Option<u128> {
        (self.m as u128).checked_pow(self.samplable_count() as u32)
    }

    /// Every tensor in canonical order: positions in layer order, sub-models
    /// in index order, weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.positions {
            match p {
                PositionParams::Stateless => {}
                PositionParams::Shared(set) => out.extend(set.tensors()),
                PositionParams::Bank(sets) => {
                    for set in sets {
                        out.extend(set.tensors());
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.positions {
            match p {
                PositionParams::Stateless => {}
                PositionParams::Shared(set) => out.extend(set.tensors_mut()),
                PositionParams::Bank(sets) => {
                    for set in sets {
                        out.extend(set.tensors_mut());
                    }
                }
            }
        }
        out
    }

    /// Scalars stored across shared and banked parameters.
    pub fn total_param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Scalars in shared positions only.
    pub fn shared_param_count(&self) -> usize {
        self.positions
            .iter()
            .map(|p| match p {
                PositionParams::Shared(set) => set.scalar_count(),
                _ => 0,
            })
            .sum()
    }

    /// Draws each entry independently and uniformly from `0..M`.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplingMask {
        SamplingMask(
            (0..self.samplable_count())
                .map(|_| rng.random_range(0..self.m))
                .collect(),
        )
    }

    /// The mask that selects sub-model `m` everywhere.
    pub fn constant_mask(&self, m: usize) -> Result<SamplingMask> {
        if m >= self.m {
            return Err(Error::Index(format!(
                "sub-model {m} out of range for M = {}",
                self.m
            )));
        }
        Ok(SamplingMask(vec![m; self.samplable_count()]))
    }

    pub fn check_mask(&self, mask: &SamplingMask) -> Result<()> {
        let l = self.samplable_count();
        if mask.len() != l {
            return Err(Error::contract(format!(
                "mask has {} entries, bank has {l} samplable positions",
                mask.len()
            )));
        }
        if let Some(bad) = mask.0.iter().find(|&&s| s >= self.m) {
            return Err(Error::contract(format!(
                "mask entry {bad} out of range for M = {}",
                self.m
            )));
        }
        Ok(())
    }

    /// All `M^L` masks in lexicographic order.
    pub fn all_masks(&self) -> Result<Vec<SamplingMask>> {
        let count = self
            .num_sampled_models()
            .filter(|&n| n <= 1 << 20)
            .ok_or_else(|| Error::contract("too many sampled models to enumerate"))?;
        let l = self.samplable_count();
        let mut masks = Vec::with_capacity(count as usize);
        let mut current = vec![0usize; l];
        for _ in 0..count {
            masks.push(SamplingMask(current.clone()));
            for slot in current.iter_mut().rev() {
                *slot += 1;
                if *slot < self.m {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(masks)
    }

    /// Places every parameter tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BankVars {
        let positions = self
            .positions
            .iter()
            .map(|p| match p {
                PositionParams::Stateless => PositionVars::Stateless,
                PositionParams::Shared(set) => PositionVars::Shared(set.bind(tape, requires_grad)),
                PositionParams::Bank(sets) => {
                    PositionVars::Bank(sets.iter().map(|s| s.bind(tape, requires_grad)).collect())
                }
            })
            .collect();
        BankVars { positions }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let shape = x.shape();
        if shape.is_empty() || shape[1..] != self.architecture.input_shape[..] {
            return Err(Error::dim(format!(
                "input {shape:?} does not match per-sample shape {:?}",
                self.architecture.input_shape
            )));
        }
        Ok(())
    }

    /// Sampled-model forward pass on a tape using bound parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        mask: &SamplingMask,
        x: Var,
    ) -> Result<Var> {
        self.check_mask(mask)?;
        let mut h = x;
        let mut sampled = 0;
        for (i, (slot, pv)) in self.architecture.layers.iter().zip(&vars.positions).enumerate() {
            let params = match pv {
                PositionVars::Stateless => None,
                PositionVars::Shared(v) => Some(*v),
                PositionVars::Bank(sets) => {
                    let choice = mask.0[sampled];
                    sampled += 1;
                    Some(sets[choice])
                }
            };
            h = layer_forward(tape, &slot.spec, params.as_ref(), h).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("layer {i} ({}): {msg}", slot.spec.name())),
                other => other,
            })?;
        }
        Ok(h)
    }

    /// Forward pass where row `i` of `x` uses `masks[i]`. Rows sharing a mask
    /// are evaluated together; the output keeps the input row order.
    pub fn forward_per_example(
        &self,
        tape: &mut Tape,
        vars: &BankVars,
        masks: &[SamplingMask],
        x: Var,
    ) -> Result<Var> {
        let rows = tape.value(x).shape().first().copied().unwrap_or(0);
        if masks.len() != rows {
            return Err(Error::contract(format!("{} masks for {rows} rows", masks.len())));
        }
        let mut groups: BTreeMap<&SamplingMask, Vec<usize>> = BTreeMap::new();
        for (i, mask) in masks.iter().enumerate() {
            groups.entry(mask).or_default().push(i);
        }
        if groups.len() == 1 {
            return self.forward_bound(tape, vars, &masks[0], x);
        }
        let mut outputs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(rows);
        for (mask, idx) in &groups {
            let part = tape.select_rows(x, idx)?;
            outputs.push(self.forward_bound(tape, vars, mask, part)?);
            order.extend_from_slice(idx);
        }
        let stacked = tape.concat_rows(&outputs)?;
        let mut inverse = vec![0; rows];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        tape.select_rows(stacked, &inverse)
    }

    /// Logits of the sampled model selected by `mask`.
    pub fn forward_sampled(&self, mask: &SamplingMask, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_bound(&mut tape, &vars, mask, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Logits of pure sub-model `m`.
    pub fn sub_model_forward(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        let mask = self.constant_mask(m)?;
        self.forward_sampled(&mask, x)
    }

    /// `∇ₓ CE(forward_sampled(mask, x), y)`.
    pub fn input_gradient(&self, mask: &SamplingMask, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.param(x.clone());
        let logits = self.forward_bound(&mut tape, &vars, mask, xv)?;
        let loss = tape.cross_entropy(logits, y)?;
        Ok(tape.backward(loss)?.take(xv))
    }

    /// Stochastic defended inference: every sample gets `n_votes` freshly
    /// drawn masks and the softmax outputs are averaged.
    pub fn predict_defended<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        rng: &mut R,
        n_votes: usize,
    ) -> Result<DefendedPrediction> {
        if n_votes < 1 {
            return Err(Error::contract("n_votes must be at least 1"));
        }
        self.check_input(x)?;
        let rows = x.shape()[0];
        let classes = self.num_classes();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut mean = vec![0.0; rows * classes];
        for vote in 1..=n_votes {
            let masks: Vec<SamplingMask> = (0..rows).map(|_| self.sample_mask(rng)).collect();
            let logits = self.forward_per_example(&mut tape, &vars, &masks, xv)?;
            let probs = tape.softmax(logits)?;
            // Running mean, so identical votes reproduce their value exactly.
            let w = 1.0 / vote as f64;
            for (m, p) in mean.iter_mut().zip(tape.value(probs).data()) {
                *m += (p - *m) * w;
            }
        }
        let probs = Tensor::new(vec![rows, classes], mean)?;
        Ok(DefendedPrediction {
            classes: probs.argmax_rows()?,
            probs,
        })
    }
}
