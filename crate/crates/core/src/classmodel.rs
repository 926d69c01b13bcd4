//! Vehicle class taxonomy: 4 vehicle types x 3 orientations = 12 classes,
//! plus the two-way grouping used to train the per-group detectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const NUM_CLASSES: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassError {
    #[error("unknown class name {name:?}; accepted names: {}", accepted_names())]
    UnknownClassName { name: String },
    #[error("class index {0} out of range 0..12")]
    IndexOutOfRange(usize),
    #[error("unknown vehicle group {0:?}; expected car_group or motorbike_group")]
    UnknownGroup(String),
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),
}

fn accepted_names() -> String {
    ObjectClass::all()
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VehicleType {
    Car,
    Truck,
    Motorcycle,
    Cycle,
}

impl VehicleType {
    pub const ALL: [VehicleType; 4] = [
        VehicleType::Car,
        VehicleType::Truck,
        VehicleType::Motorcycle,
        VehicleType::Cycle,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleType::Car => "car",
            VehicleType::Truck => "truck",
            VehicleType::Motorcycle => "motorcycle",
            VehicleType::Cycle => "cycle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Orientation {
    Back,
    Front,
    Side,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Back, Orientation::Front, Orientation::Side];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Back => "back",
            Orientation::Front => "front",
            Orientation::Side => "side",
        }
    }
}

/// One of the 12 (vehicle type, orientation) classes.
///
/// Ordering follows [`ObjectClass::index`], so sorted collections of classes
/// come out in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectClass {
    pub vehicle_type: VehicleType,
    pub orientation: Orientation,
}

impl ObjectClass {
    pub const fn new(vehicle_type: VehicleType, orientation: Orientation) -> Self {
        Self {
            vehicle_type,
            orientation,
        }
    }

    /// `vehicle_type_code * 3 + orientation_code`.
    pub fn index(self) -> usize {
        self.vehicle_type.code() * Orientation::ALL.len() + self.orientation.code()
    }

    pub fn from_index(index: usize) -> Result<Self, ClassError> {
        if index >= NUM_CLASSES {
            return Err(ClassError::IndexOutOfRange(index));
        }
        Ok(Self::new(
            VehicleType::ALL[index / Orientation::ALL.len()],
            Orientation::ALL[index % Orientation::ALL.len()],
        ))
    }

    /// All 12 classes in index order.
    pub fn all() -> impl Iterator<Item = ObjectClass> + Clone {
        (0..NUM_CLASSES).map(|i| ObjectClass::from_index(i).expect("index in range"))
    }

    pub fn group(self) -> VehicleGroup {
        group_of(self)
    }

    /// `<type>_<orientation>`, e.g. `car_back`.
    pub fn name(self) -> String {
        format!("{}_{}", self.vehicle_type.name(), self.orientation.name())
    }
}

/// Position of `class` in the fixed 12-class index space.
pub fn class_index(class: ObjectClass) -> usize {
    class.index()
}

pub fn class_of_index(index: usize) -> Result<ObjectClass, ClassError> {
    ObjectClass::from_index(index)
}

/// Binary simplification used by the detectors. Trucks ride with cars,
/// cycles with motorcycles; orientation never matters.
pub fn group_of(class: ObjectClass) -> VehicleGroup {
    match class.vehicle_type {
        VehicleType::Car | VehicleType::Truck => VehicleGroup::Car,
        VehicleType::Motorcycle | VehicleType::Cycle => VehicleGroup::Motorbike,
    }
}

pub fn parse_class_name(s: &str) -> Result<ObjectClass, ClassError> {
    ObjectClass::all()
        .find(|c| c.name() == s)
        .ok_or_else(|| ClassError::UnknownClassName { name: s.to_owned() })
}

pub fn format_class_name(class: ObjectClass) -> String {
    class.name()
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}",
            self.vehicle_type.name(),
            self.orientation.name()
        )
    }
}

impl FromStr for ObjectClass {
    type Err = ClassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_class_name(s)
    }
}

impl Serialize for ObjectClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_class_name(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleGroup {
    #[serde(rename = "car_group")]
    Car,
    #[serde(rename = "motorbike_group")]
    Motorbike,
}

impl VehicleGroup {
    pub const ALL: [VehicleGroup; 2] = [VehicleGroup::Car, VehicleGroup::Motorbike];

    pub fn name(self) -> &'static str {
        match self {
            VehicleGroup::Car => "car_group",
            VehicleGroup::Motorbike => "motorbike_group",
        }
    }

    pub fn members(self) -> impl Iterator<Item = ObjectClass> {
        ObjectClass::all().filter(move |c| group_of(*c) == self)
    }
}

impl fmt::Display for VehicleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VehicleGroup {
    type Err = ClassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VehicleGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| ClassError::UnknownGroup(s.to_owned()))
    }
}

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over the 12 classes, indexed by [`ObjectClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ClassProbs([f64; NUM_CLASSES]);

impl ClassProbs {
    pub fn new(values: &[f64]) -> Result<Self, ClassError> {
        let arr: [f64; NUM_CLASSES] = values.try_into().map_err(|_| {
            ClassError::InvalidProbs(format!(
                "expected {NUM_CLASSES} entries, got {}",
                values.len()
            ))
        })?;
        if let Some(bad) = arr.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(ClassError::InvalidProbs(format!(
                "entry {bad} is not a non-negative number"
            )));
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(ClassError::InvalidProbs(format!("entries sum to {sum}")));
        }
        Ok(Self(arr))
    }

    pub fn one_hot(class: ObjectClass) -> Self {
        let mut arr = [0.0; NUM_CLASSES];
        arr[class.index()] = 1.0;
        Self(arr)
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: ObjectClass) -> f64 {
        self.0[class.index()]
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> ObjectClass {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        ObjectClass::from_index(best).expect("index in range")
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax().index()]
    }
}

impl<'de> Deserialize<'de> for ClassProbs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(deserializer)?;
        ClassProbs::new(&v).map_err(serde::de::Error::custom)
    }
}
