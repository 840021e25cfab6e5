//! Two-level region geography: identities, parent-child links, land areas,
//! and the batching contract (all children of one parent form one
//! supervision unit).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Region identifiers are opaque string keys.
pub type RegionId = String;

/// Level of a region in the two-level geography.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionLevel {
    /// Low-resolution parent region (NUTS2).
    Parent,
    /// High-resolution child sub-region (NUTS3).
    Child,
}

impl RegionLevel {
    /// Token used in `regions.csv`.
    pub fn as_str(self) -> &'static str {
        match self {
            RegionLevel::Parent => "NUTS2",
            RegionLevel::Child => "NUTS3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "NUTS2" => Some(RegionLevel::Parent),
            "NUTS3" => Some(RegionLevel::Child),
            _ => None,
        }
    }
}

/// One region: identity, level, optional parent link, categorical tags and
/// land area in hectares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub level: RegionLevel,
    /// Required iff `level == Child`.
    pub parent_id: Option<RegionId>,
    pub country: String,
    pub agro_env_zone: String,
    /// Hectares, strictly positive.
    pub land_area: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("duplicate region id {0:?}")]
    DuplicateId(RegionId),
    #[error("child {child:?} references missing parent {parent:?}")]
    MissingParent { child: RegionId, parent: RegionId },
    #[error("region {0:?} has non-positive land area {1}")]
    NonPositiveLandArea(RegionId, f64),
    #[error("unknown region {0:?}")]
    UnknownRegion(RegionId),
    #[error("region {0:?} is not a parent")]
    NotAParent(RegionId),
    #[error("child {0:?} must declare a parent_id")]
    ChildWithoutParent(RegionId),
    #[error("parent {0:?} must not declare a parent_id")]
    ParentWithParent(RegionId),
    #[error("regions.csv: {0}")]
    Csv(String),
}

/// A structural invariant breach found by [`RegionHierarchy::validate`].
/// Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub region_id: RegionId,
    pub reason: String,
}

/// Keyed collection of regions plus a parent -> ordered children index.
///
/// Immutable after construction; building is single-threaded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionHierarchy {
    regions: BTreeMap<RegionId, Region>,
    children: BTreeMap<RegionId, Vec<RegionId>>,
}

impl RegionHierarchy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a region. Children require their parent to be present already.
    pub fn add_region(&mut self, region: Region) -> Result<(), HierarchyError> {
        if self.regions.contains_key(&region.id) {
            return Err(HierarchyError::DuplicateId(region.id));
        }
        if !(region.land_area > 0.0) {
            return Err(HierarchyError::NonPositiveLandArea(region.id, region.land_area));
        }
        match (region.level, &region.parent_id) {
            (RegionLevel::Child, None) => {
                return Err(HierarchyError::ChildWithoutParent(region.id));
            }
            (RegionLevel::Parent, Some(_)) => {
                return Err(HierarchyError::ParentWithParent(region.id));
            }
            (RegionLevel::Child, Some(pid)) => {
                match self.regions.get(pid) {
                    Some(p) if p.level == RegionLevel::Parent => {}
                    _ => {
                        return Err(HierarchyError::MissingParent {
                            child: region.id,
                            parent: pid.clone(),
                        })
                    }
                }
                let siblings = self.children.entry(pid.clone()).or_default();
                // Keep children lexicographically ordered so batches are reproducible.
                let pos = siblings.binary_search(&region.id).unwrap_err();
                siblings.insert(pos, region.id.clone());
            }
            (RegionLevel::Parent, None) => {
                self.children.entry(region.id.clone()).or_default();
            }
        }
        self.regions.insert(region.id.clone(), region);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Region> {
        self.regions.get(id)
    }

    /// All region ids, lexicographic.
    pub fn ids(&self) -> impl Iterator<Item = &RegionId> {
        self.regions.keys()
    }

    /// Parent ids, lexicographic.
    pub fn parent_ids(&self) -> impl Iterator<Item = &RegionId> {
        self.regions
            .values()
            .filter(|r| r.level == RegionLevel::Parent)
            .map(|r| &r.id)
    }

    /// Child ids, lexicographic.
    pub fn child_ids(&self) -> impl Iterator<Item = &RegionId> {
        self.regions
            .values()
            .filter(|r| r.level == RegionLevel::Child)
            .map(|r| &r.id)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Ordered child keys of a parent. Lexicographic, stable across calls.
    pub fn children_of(&self, parent_id: &str) -> Result<&[RegionId], HierarchyError> {
        let region = self
            .regions
            .get(parent_id)
            .ok_or_else(|| HierarchyError::UnknownRegion(parent_id.to_string()))?;
        if region.level != RegionLevel::Parent {
            return Err(HierarchyError::NotAParent(parent_id.to_string()));
        }
        Ok(self.children.get(parent_id).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Report every invariant breach with region id and reason.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for region in self.regions.values() {
            if !(region.land_area > 0.0) {
                out.push(Violation {
                    region_id: region.id.clone(),
                    reason: format!("land_area {} is not strictly positive", region.land_area),
                });
            }
            match region.level {
                RegionLevel::Parent => {
                    let n = self.children.get(&region.id).map(Vec::len).unwrap_or(0);
                    if n == 0 {
                        out.push(Violation {
                            region_id: region.id.clone(),
                            reason: "parent has no children".into(),
                        });
                    }
                }
                RegionLevel::Child => match region.parent_id.as_deref().and_then(|p| self.regions.get(p)) {
                    None => out.push(Violation {
                        region_id: region.id.clone(),
                        reason: "child with unresolved parent".into(),
                    }),
                    Some(parent) => {
                        if parent.country != region.country {
                            out.push(Violation {
                                region_id: region.id.clone(),
                                reason: format!(
                                    "country {:?} differs from parent's {:?}",
                                    region.country, parent.country
                                ),
                            });
                        }
                    }
                },
            }
        }
        out
    }

    /// Write `regions.csv` rows (no comment header; callers prepend one).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "id,level,parent_id,country,zone,land_area_ha")?;
        for r in self.regions.values() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.id,
                r.level.as_str(),
                r.parent_id.as_deref().unwrap_or(""),
                r.country,
                r.agro_env_zone,
                r.land_area
            )?;
        }
        Ok(())
    }

    /// Read `regions.csv` (header `id,level,parent_id,country,zone,land_area_ha`;
    /// `#` comment lines allowed before the header). Parents must appear
    /// before their children or anywhere in the file; rows are inserted
    /// parents-first to permit any row order.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, HierarchyError> {
        let mut rows: Vec<Region> = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| HierarchyError::Csv(e.to_string()))?;
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != "id,level,parent_id,country,zone,land_area_ha" {
                    return Err(HierarchyError::Csv(format!(
                        "unexpected header {line:?} (line {})",
                        lineno + 1
                    )));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(HierarchyError::Csv(format!(
                    "expected 6 fields, got {} (line {})",
                    fields.len(),
                    lineno + 1
                )));
            }
            let level = RegionLevel::parse(fields[1]).ok_or_else(|| {
                HierarchyError::Csv(format!("unknown level {:?} (line {})", fields[1], lineno + 1))
            })?;
            let parent_id = if fields[2].is_empty() { None } else { Some(fields[2].to_string()) };
            if level == RegionLevel::Parent && parent_id.is_some() {
                return Err(HierarchyError::Csv(format!(
                    "NUTS2 row {:?} must have empty parent_id (line {})",
                    fields[0],
                    lineno + 1
                )));
            }
            let land_area: f64 = fields[5].parse().map_err(|_| {
                HierarchyError::Csv(format!(
                    "bad land_area_ha {:?} (line {})",
                    fields[5],
                    lineno + 1
                ))
            })?;
            rows.push(Region {
                id: fields[0].to_string(),
                level,
                parent_id,
                country: fields[3].to_string(),
                agro_env_zone: fields[4].to_string(),
                land_area,
            });
        }
        if !header_seen {
            return Err(HierarchyError::Csv("missing header row".into()));
        }
        let mut h = RegionHierarchy::new();
        for row in rows.iter().filter(|r| r.level == RegionLevel::Parent) {
            h.add_region(row.clone())?;
        }
        for row in rows.into_iter().filter(|r| r.level == RegionLevel::Child) {
            h.add_region(row)?;
        }
        Ok(h)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, HierarchyError> {
        let file = std::fs::File::open(path)
            .map_err(|e| HierarchyError::Csv(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parent(id: &str, country: &str, land: f64) -> Region {
        Region {
            id: id.into(),
            level: RegionLevel::Parent,
            parent_id: None,
            country: country.into(),
            agro_env_zone: "Z1".into(),
            land_area: land,
        }
    }

    fn child(id: &str, parent: &str, country: &str, land: f64) -> Region {
        Region {
            id: id.into(),
            level: RegionLevel::Child,
            parent_id: Some(parent.into()),
            country: country.into(),
            agro_env_zone: "Z1".into(),
            land_area: land,
        }
    }

    #[test]
    fn add_then_lookup() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1000.0)).unwrap();
        h.add_region(child("P1C1", "P1", "AA", 400.0)).unwrap();
        assert_eq!(h.children_of("P1").unwrap(), &["P1C1".to_string()]);
    }

    #[test]
    fn missing_parent_rejected() {
        let mut h = RegionHierarchy::new();
        let err = h.add_region(child("X1", "NOPE", "AA", 10.0)).unwrap_err();
        assert_eq!(
            err,
            HierarchyError::MissingParent { child: "X1".into(), parent: "NOPE".into() }
        );
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1000.0)).unwrap();
        let err = h.add_region(parent("P1", "AA", 1000.0)).unwrap_err();
        assert_eq!(err, HierarchyError::DuplicateId("P1".into()));
    }

    #[test]
    fn non_positive_land_rejected() {
        let mut h = RegionHierarchy::new();
        assert!(matches!(
            h.add_region(parent("P1", "AA", 0.0)),
            Err(HierarchyError::NonPositiveLandArea(_, _))
        ));
    }

    #[test]
    fn children_sorted_lexicographically() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1000.0)).unwrap();
        for id in ["P1C2", "P1C1", "P1C3"] {
            h.add_region(child(id, "P1", "AA", 100.0)).unwrap();
        }
        assert_eq!(h.children_of("P1").unwrap(), &["P1C1", "P1C2", "P1C3"]);
        // stable across calls
        assert_eq!(h.children_of("P1").unwrap(), h.children_of("P1").unwrap());
    }

    #[test]
    fn children_of_errors() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1000.0)).unwrap();
        h.add_region(child("P1C1", "P1", "AA", 100.0)).unwrap();
        assert_eq!(
            h.children_of("P1C1").unwrap_err(),
            HierarchyError::NotAParent("P1C1".into())
        );
        assert_eq!(
            h.children_of("NOPE").unwrap_err(),
            HierarchyError::UnknownRegion("NOPE".into())
        );
    }

    #[test]
    fn validate_well_formed() {
        let mut h = RegionHierarchy::new();
        for p in ["P1", "P2"] {
            h.add_region(parent(p, "AA", 1000.0)).unwrap();
        }
        for (c, p) in [("P1C1", "P1"), ("P1C2", "P1"), ("P2C1", "P2"), ("P2C2", "P2")] {
            h.add_region(child(c, p, "AA", 100.0)).unwrap();
        }
        assert!(h.validate().is_empty());
    }

    #[test]
    fn validate_reports_childless_parent_and_country_mismatch() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1000.0)).unwrap();
        h.add_region(parent("P2", "AA", 1000.0)).unwrap();
        h.add_region(child("P2C1", "P2", "BB", 100.0)).unwrap();
        let violations = h.validate();
        assert_eq!(violations.len(), 2);
        assert!(violations.iter().any(|v| v.region_id == "P1" && v.reason.contains("no children")));
        assert!(violations.iter().any(|v| v.region_id == "P2C1" && v.reason.contains("country")));
    }

    #[test]
    fn children_partition_all_child_regions() {
        let mut h = RegionHierarchy::new();
        for p in ["P1", "P2", "P3"] {
            h.add_region(parent(p, "AA", 1000.0)).unwrap();
        }
        for (c, p) in [("a", "P2"), ("b", "P1"), ("c", "P3"), ("d", "P1")] {
            h.add_region(child(c, p, "AA", 50.0)).unwrap();
        }
        let mut union: Vec<RegionId> = Vec::new();
        for p in h.parent_ids() {
            union.extend(h.children_of(p).unwrap().iter().cloned());
        }
        union.sort();
        let all: Vec<RegionId> = h.child_ids().cloned().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn csv_round_trip_identity() {
        let mut h = RegionHierarchy::new();
        h.add_region(parent("P1", "AA", 1234.5)).unwrap();
        h.add_region(child("P1C1", "P1", "AA", 617.25)).unwrap();
        h.add_region(child("P1C2", "P1", "AA", 617.25)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let back = RegionHierarchy::read_csv(&buf[..]).unwrap();
        assert_eq!(h, back);
    }

    #[test]
    fn csv_rejects_parent_with_parent_id() {
        let data = "id,level,parent_id,country,zone,land_area_ha\nP1,NUTS2,X,AA,Z1,10\n";
        assert!(matches!(
            RegionHierarchy::read_csv(data.as_bytes()),
            Err(HierarchyError::Csv(_))
        ));
    }
}
