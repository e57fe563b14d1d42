//! Named, role-tagged parameter collections and their binary checkpoint
//! format.
//!
//! Roles drive selective aggregation (e.g. keeping batch-normalization
//! layers local) and selective optimizer application (e.g. a loss term that
//! only updates the prediction head). Entries with `requires_grad == false`
//! are buffers (running statistics): they are serialized and aggregated
//! like any other entry of their role, but the optimizer never touches
//! them.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRAUG001";

/// Parameter role tags. The numeric codes are part of the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Extractor = 0,
    Head = 1,
    BatchNorm = 2,
    Generator = 3,
    RtNet = 4,
}

impl Role {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Extractor),
            1 => Some(Role::Head),
            2 => Some(Role::BatchNorm),
            3 => Some(Role::Generator),
            4 => Some(Role::RtNet),
            _ => None,
        }
    }

    pub const ALL: [Role; 5] = [
        Role::Extractor,
        Role::Head,
        Role::BatchNorm,
        Role::Generator,
        Role::RtNet,
    ];
}

/// Small set of roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoleMask(u8);

impl RoleMask {
    pub const EMPTY: RoleMask = RoleMask(0);

    pub fn of(roles: &[Role]) -> Self {
        let mut mask = 0u8;
        for role in roles {
            mask |= 1 << role.code();
        }
        RoleMask(mask)
    }

    pub fn all() -> Self {
        RoleMask::of(&Role::ALL)
    }

    pub fn contains(self, role: Role) -> bool {
        self.0 & (1 << role.code()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor<T>,
}

/// Ordered map from parameter name to role-tagged tensor.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T: Element> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::structure(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, role, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::structure(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::structure(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Total number of scalar elements across entries whose role matches the
    /// filter (`None` counts everything).
    pub fn count_params(&self, filter: Option<RoleMask>) -> u64 {
        self.entries
            .iter()
            .filter(|e| filter.map_or(true, |m| m.contains(e.role)))
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.tensor.zero_grad();
        }
    }

    /// Two sets are aggregation-compatible iff their name/role/shape
    /// sequences are identical.
    pub fn check_compatible(&self, other: &ParameterSet<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::structure(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::structure(format!(
                    "first mismatching entry: '{}' ({:?} {:?}) vs '{}' ({:?} {:?})",
                    a.name,
                    a.role,
                    a.tensor.shape(),
                    b.name,
                    b.role,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// A copy containing only entries whose role is outside `exclude`.
    pub fn without_roles(&self, exclude: RoleMask) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for entry in &self.entries {
            if !exclude.contains(entry.role) {
                out.insert(entry.name.clone(), entry.role, entry.tensor.clone())
                    .expect("names unique in source set");
            }
        }
        out
    }

    /// Overwrite the values of entries present in `incoming`, by name.
    /// Entries absent from `incoming` keep their local values.
    pub fn merge_overwrite(&mut self, incoming: &ParameterSet<T>) -> Result<()> {
        for entry in &incoming.entries {
            let local = self.get_mut(&entry.name).map_err(|_| {
                Error::structure(format!(
                    "broadcast carries unknown parameter '{}'",
                    entry.name
                ))
            })?;
            if local.role != entry.role || local.tensor.shape() != entry.tensor.shape() {
                return Err(Error::structure(format!(
                    "incompatible broadcast entry '{}': {:?} {:?} vs {:?} {:?}",
                    entry.name,
                    local.role,
                    local.tensor.shape(),
                    entry.role,
                    entry.tensor.shape()
                )));
            }
            let requires = local.tensor.requires_grad();
            local.tensor = entry.tensor.clone().with_requires_grad(requires);
        }
        Ok(())
    }

    // ---- binary checkpoint format -----------------------------------------

    /// Serialize entries (optionally excluding roles) in iteration order.
    pub fn write_to(&self, out: &mut impl Write, exclude: RoleMask) -> Result<()> {
        let selected: Vec<&ParamEntry<T>> = self
            .entries
            .iter()
            .filter(|e| !exclude.contains(e.role))
            .collect();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(selected.len() as u32).to_le_bytes());
        for entry in selected {
            let name_bytes = entry.name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::structure(format!(
                    "parameter name too long: '{}'",
                    entry.name
                )));
            }
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(entry.role.code());
            buf.push(T::DTYPE as u8);
            let shape = entry.tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::structure("tensor rank exceeds checkpoint format"));
            }
            buf.push(shape.len() as u8);
            for &dim in shape {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in entry.tensor.data() {
                v.write_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self, exclude: RoleMask) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, exclude)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Deserialize a checkpoint produced by [`ParameterSet::write_to`].
    ///
    /// Entries named `*.running_mean` / `*.running_var` are restored as
    /// buffers (`requires_grad == false`); everything else is trainable.
    pub fn read_from(input: &mut impl Read) -> Result<ParameterSet<T>> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet<T>> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::structure("bad checkpoint magic"));
        }
        let count = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cursor.take(name_len)?)
                .map_err(|_| Error::structure("non-UTF8 parameter name"))?
                .to_string();
            let role = Role::from_code(cursor.take(1)?[0])
                .ok_or_else(|| Error::structure(format!("bad role code for '{name}'")))?;
            let dtype = Dtype::from_code(cursor.take(1)?[0])
                .ok_or_else(|| Error::structure(format!("bad dtype code for '{name}'")))?;
            if dtype != T::DTYPE {
                return Err(Error::structure(format!(
                    "checkpoint dtype {:?} does not match requested element type {:?}",
                    dtype,
                    T::DTYPE
                )));
            }
            let rank = cursor.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cursor.take(numel * T::BYTES)?;
            let mut data = Vec::with_capacity(numel);
            for chunk in raw.chunks_exact(T::BYTES) {
                data.push(T::read_le(chunk));
            }
            let requires = !(name.ends_with(".running_mean") || name.ends_with(".running_var"));
            let tensor = Tensor::from_vec(shape, data)?.with_requires_grad(requires);
            set.insert(name, role, tensor)?;
        }
        if cursor.pos != bytes.len() {
            return Err(Error::structure("trailing bytes after checkpoint payload"));
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::structure("truncated checkpoint"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

/// Elementwise mean over aggregation-compatible parameter sets.
///
/// Each element's client values are sorted (total order) before summation in
/// f64, so the result is independent of client ordering; identical inputs
/// short-circuit to the shared value, making aggregation of K copies of the
/// same set exactly idempotent.
pub fn aggregate_mean<T: Element>(
    sets: &[&ParameterSet<T>],
    exclude: RoleMask,
) -> Result<ParameterSet<T>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::config("aggregation requires at least one client"))?;
    for other in &sets[1..] {
        first.check_compatible(other)?;
    }
    let mut out = ParameterSet::new();
    let k = sets.len();
    let inv_k = 1.0 / k as f64;
    let mut scratch: Vec<f64> = Vec::with_capacity(k);
    for (entry_idx, entry) in first.iter().enumerate() {
        if exclude.contains(entry.role) {
            continue;
        }
        let numel = entry.tensor.numel();
        let mut data = Vec::with_capacity(numel);
        for elem in 0..numel {
            let first_val = sets[0].entries[entry_idx].tensor.data()[elem];
            let all_same = sets[1..]
                .iter()
                .all(|s| s.entries[entry_idx].tensor.data()[elem] == first_val);
            if all_same {
                data.push(first_val);
                continue;
            }
            scratch.clear();
            for set in sets {
                scratch.push(set.entries[entry_idx].tensor.data()[elem].as_f64());
            }
            scratch.sort_by(f64::total_cmp);
            let sum: f64 = scratch.iter().sum();
            data.push(T::from_f64(sum * inv_k));
        }
        let requires = entry.tensor.requires_grad();
        let tensor = Tensor::from_vec(entry.tensor.shape().to_vec(), data)?
            .with_requires_grad(requires);
        out.insert(entry.name.clone(), entry.role, tensor)?;
    }
    Ok(out)
}
