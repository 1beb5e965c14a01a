//! Skill units: addressable groups of trainable coordinates.
//!
//! At matrix level every `A` and `B` is one unit. At LoRA rank-1 level unit
//! `(layer, i)` owns row `i` of `A` and column `i` of `B`, the two factors of
//! the rank-one term `bᵢ·aᵢ`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lora::Model;
use crate::scalar::Scalar;
use crate::tensor::ParamId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    MatrixLevel,
    #[default]
    LoraRank1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitKind {
    MatrixA,
    MatrixB,
    Rank1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SkillUnitId {
    pub layer: usize,
    pub kind: UnitKind,
    pub component: usize,
}

impl fmt::Display for SkillUnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            UnitKind::MatrixA => 'A',
            UnitKind::MatrixB => 'B',
            UnitKind::Rank1 => 'u',
        };
        write!(f, "L{}.{}{}", self.layer, tag, self.component)
    }
}

impl FromStr for SkillUnitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownUnit(s.to_string());
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, unit) = rest.split_once('.').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let mut chars = unit.chars();
        let kind = match chars.next() {
            Some('A') => UnitKind::MatrixA,
            Some('B') => UnitKind::MatrixB,
            Some('u') => UnitKind::Rank1,
            _ => return Err(bad()),
        };
        let component = chars.as_str().parse().map_err(|_| bad())?;
        Ok(Self { layer, kind, component })
    }
}

/// Location of one trainable scalar: matrix id plus row-major flat index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

/// Exact cover of a model's trainable coordinates by skill units.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    granularity: Granularity,
    units: Vec<SkillUnitId>,
    coords: Vec<Vec<Coord>>,
    /// Same coordinates as positions in [`flatten_params`] order.
    flat: Vec<Vec<usize>>,
    total: usize,
}

impl Partition {
    pub fn new<T: Scalar>(model: &Model<T>, granularity: Granularity) -> Self {
        match granularity {
            Granularity::MatrixLevel => partition_matrix_level(model),
            Granularity::LoraRank1 => partition_lora_rank1(model),
        }
    }

    fn build<T: Scalar>(model: &Model<T>, granularity: Granularity, units: Vec<(SkillUnitId, Vec<Coord>)>) -> Self {
        let offsets = param_offsets(model);
        let flat = units
            .iter()
            .map(|(_, cs)| cs.iter().map(|c| offsets[c.param.0] + c.index).collect())
            .collect();
        let (units, coords) = units.into_iter().unzip();
        Self { granularity, units, coords, flat, total: model.trainable_count() }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn units(&self) -> &[SkillUnitId] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Number of trainable coordinates the partition covers.
    pub fn coordinate_count(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, id: SkillUnitId) -> Result<usize> {
        self.units.binary_search(&id).map_err(|_| Error::UnknownUnit(id.to_string()))
    }

    pub fn coords(&self, unit: usize) -> &[Coord] {
        &self.coords[unit]
    }

    /// Coordinates of `unit` as positions into the flattened parameter vector.
    pub fn flat_indices(&self, unit: usize) -> &[usize] {
        &self.flat[unit]
    }

    pub fn unit_values<T: Scalar>(&self, id: SkillUnitId, model: &Model<T>) -> Result<Vec<T>> {
        let u = self.index_of(id)?;
        Ok(self.values_at(u, model))
    }

    pub(crate) fn values_at<T: Scalar>(&self, unit: usize, model: &Model<T>) -> Vec<T> {
        self.coords[unit]
            .iter()
            .map(|c| model.param(c.param).expect("partition built for this model").as_slice()[c.index])
            .collect()
    }

    pub fn set_unit_values<T: Scalar>(&self, id: SkillUnitId, model: &mut Model<T>, values: &[T]) -> Result<()> {
        let u = self.index_of(id)?;
        self.write_at(u, model, values)
    }

    pub(crate) fn write_at<T: Scalar>(&self, unit: usize, model: &mut Model<T>, values: &[T]) -> Result<()> {
        let coords = &self.coords[unit];
        if coords.len() != values.len() {
            return Err(Error::LengthMismatch { left: coords.len(), right: values.len() });
        }
        for (c, &v) in coords.iter().zip(values) {
            model.param_mut(c.param).expect("partition built for this model").as_mut_slice()[c.index] = v;
        }
        Ok(())
    }

    /// Whether `model` has the architecture this partition was built for.
    pub fn fits<T: Scalar>(&self, model: &Model<T>) -> bool {
        *self == Partition::new(model, self.granularity)
    }
}

fn param_offsets<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut acc = 0;
    for id in model.trainable_ids() {
        debug_assert_eq!(id.0, offsets.len());
        offsets.push(acc);
        acc += model.param(id).expect("own id").len();
    }
    offsets
}

/// All trainable parameters as one vector: ids ascending, each matrix row-major.
pub fn flatten_params<T: Scalar>(model: &Model<T>) -> Vec<T> {
    model
        .trainable_ids()
        .into_iter()
        .flat_map(|id| model.param(id).expect("own id").as_slice().to_vec())
        .collect()
}

/// One unit per `A` and per `B`.
pub fn partition_matrix_level<T: Scalar>(model: &Model<T>) -> Partition {
    let mut units = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let a = (0..layer.a().len()).map(|index| Coord { param: Model::<T>::a_id(l), index }).collect();
        let b = (0..layer.b().len()).map(|index| Coord { param: Model::<T>::b_id(l), index }).collect();
        units.push((SkillUnitId { layer: l, kind: UnitKind::MatrixA, component: 0 }, a));
        units.push((SkillUnitId { layer: l, kind: UnitKind::MatrixB, component: 0 }, b));
    }
    Partition::build(model, Granularity::MatrixLevel, units)
}

/// One unit per rank index: row `i` of `A` followed by column `i` of `B`.
pub fn partition_lora_rank1<T: Scalar>(model: &Model<T>) -> Partition {
    let mut units = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let (rank, input, out) = (layer.rank(), layer.in_dim(), layer.out_dim());
        for i in 0..rank {
            let mut cs: Vec<Coord> = (0..input).map(|c| Coord { param: Model::<T>::a_id(l), index: i * input + c }).collect();
            cs.extend((0..out).map(|r| Coord { param: Model::<T>::b_id(l), index: r * rank + i }));
            units.push((SkillUnitId { layer: l, kind: UnitKind::Rank1, component: i }, cs));
        }
    }
    Partition::build(model, Granularity::LoraRank1, units)
}
