//! Class vocabularies.

/// Default benchmark classes, in label-id order.
pub const DEFAULT_CLASSES: [&str; 6] = ["road", "building", "sky", "vegetation", "car", "person"];

/// Static classes of the default benchmark.
pub const DEFAULT_STATIC: [&str; 4] = ["road", "building", "sky", "vegetation"];

/// The 13 evaluation classes of the real-city setting.
pub const CITY13_CLASSES: [&str; 13] = [
    "road",
    "sidewalk",
    "building",
    "traffic light",
    "traffic sign",
    "vegetation",
    "sky",
    "person",
    "rider",
    "car",
    "bus",
    "motorcycle",
    "bicycle",
];

/// Static-object classes used with real-city data. Names not present in the
/// active class list are skipped when resolved.
pub const CITY_STATIC_CLASSES: [&str; 11] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
];

pub const ROAD: u8 = 0;
pub const BUILDING: u8 = 1;
pub const SKY: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const CAR: u8 = 4;
pub const PERSON: u8 = 5;

/// Label value for pixels excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Ordered class names plus the static subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    is_static: Vec<bool>,
}

impl ClassSet {
    /// Builds a class set; static names not in `names` are ignored.
    pub fn new<S: AsRef<str>>(names: &[S], static_names: &[S]) -> Self {
        let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
        let is_static = names
            .iter()
            .map(|n| static_names.iter().any(|s| s.as_ref() == n))
            .collect();
        Self { names, is_static }
    }

    pub fn default_six() -> Self {
        Self::new(&DEFAULT_CLASSES, &DEFAULT_STATIC)
    }

    pub fn city13() -> Self {
        Self::new(&CITY13_CLASSES, &CITY_STATIC_CLASSES)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_static(&self, id: usize) -> bool {
        self.is_static.get(id).copied().unwrap_or(false)
    }

    pub fn static_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_static[i]).collect()
    }

    /// Per-class static flags, index-aligned with the class list.
    pub fn static_flags(&self) -> &[bool] {
        &self.is_static
    }

    /// Replaces the static subset.
    pub fn with_static<S: AsRef<str>>(&self, static_names: &[S]) -> Self {
        Self::new(&self.names, &static_names.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>())
    }
}
