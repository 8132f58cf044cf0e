//! Concept vocabularies, annotated reference packs, and transfer of concept
//! masks onto a target image through the transport plan.
//!
//! A reference pack bundles images that carry a mask for every vocabulary
//! concept. Transfer picks the reference with the lowest transport cost at a
//! coarse resolution, solves the full problem at the working resolution,
//! takes each concept's dense core on the target side, and upsamples the
//! result back to image resolution. An optional box-prompted refinement
//! service can then sharpen each region's mask.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_to_bbox, BBox, Mask};
use crate::image::{load_image, save_image, GrayImage};
use crate::services::{bounded_parallel_map, RefineOutcome, RefinerService};
use crate::transport::{
    build_distribution, select_reference, solve_uot, transfer_region, UotParams, DEFAULT_COVERAGE,
};

/// Resolution concept transfer solves at.
pub const DEFAULT_WORK_RESOLUTION: (u32, u32) = (56, 56);

/// Resolution reference selection solves at.
pub const DEFAULT_SELECTION_RESOLUTION: (u32, u32) = (14, 14);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Composite {
    pub name: String,
    pub member_ids: Vec<String>,
}

/// Ordered concept list plus predefined composite groups. Ordering drives
/// every downstream tie-break, so it is preserved end-to-end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary")]
pub struct ConceptVocabulary {
    concepts: Vec<Concept>,
    composites: Vec<Composite>,
}

#[derive(Deserialize)]
struct RawVocabulary {
    concepts: Vec<Concept>,
    composites: Vec<Composite>,
}

impl TryFrom<RawVocabulary> for ConceptVocabulary {
    type Error = Error;
    fn try_from(raw: RawVocabulary) -> Result<Self> {
        ConceptVocabulary::from_parts(raw.concepts, raw.composites)
    }
}

impl ConceptVocabulary {
    pub fn from_parts(concepts: Vec<Concept>, composites: Vec<Composite>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::InvalidVocabulary("no concepts".to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &concepts {
            if c.id.is_empty() {
                return Err(Error::InvalidVocabulary("empty concept id".to_string()));
            }
            if !seen.insert(c.id.clone()) {
                return Err(Error::InvalidVocabulary(format!("duplicate id {}", c.id)));
            }
        }
        for comp in &composites {
            if !seen.insert(comp.name.clone()) {
                return Err(Error::InvalidVocabulary(format!(
                    "composite name {} collides",
                    comp.name
                )));
            }
            if comp.member_ids.is_empty() {
                return Err(Error::InvalidVocabulary(format!(
                    "composite {} has no members",
                    comp.name
                )));
            }
            for id in &comp.member_ids {
                if !concepts.iter().any(|c| &c.id == id) {
                    return Err(Error::InvalidVocabulary(format!(
                        "composite {} references unknown id {}",
                        comp.name, id
                    )));
                }
            }
        }
        Ok(ConceptVocabulary {
            concepts,
            composites,
        })
    }

    /// Convenience constructor from `(id, name)` and `(name, members)` pairs.
    pub fn new(concepts: Vec<(&str, &str)>, composites: Vec<(&str, Vec<&str>)>) -> Result<Self> {
        Self::from_parts(
            concepts
                .into_iter()
                .map(|(id, name)| Concept {
                    id: id.to_string(),
                    name: name.to_string(),
                })
                .collect(),
            composites
                .into_iter()
                .map(|(name, members)| Composite {
                    name: name.to_string(),
                    member_ids: members.into_iter().map(str::to_string).collect(),
                })
                .collect(),
        )
    }

    /// The 11 ImaGenome anatomical regions and the four composite groups.
    pub fn imagenome_default() -> Self {
        let concepts = [
            ("cardiac_silhouette", "cardiac silhouette"),
            ("left_lung", "left lung"),
            ("right_lung", "right lung"),
            ("mediastinum", "mediastinum"),
            ("upper_mediastinum", "upper mediastinum"),
            ("left_clavicle", "left clavicle"),
            ("right_clavicle", "right clavicle"),
            ("left_hilar_structures", "left hilar structures"),
            ("right_hilar_structures", "right hilar structures"),
            ("left_costophrenic_angle", "left costophrenic angle"),
            ("right_costophrenic_angle", "right costophrenic angle"),
        ];
        let composites = [
            ("left lung + right lung", vec!["left_lung", "right_lung"]),
            (
                "left clavicle + right clavicle",
                vec!["left_clavicle", "right_clavicle"],
            ),
            (
                "left hilar structures + right hilar structures",
                vec!["left_hilar_structures", "right_hilar_structures"],
            ),
            (
                "left costophrenic angle + right costophrenic angle",
                vec!["left_costophrenic_angle", "right_costophrenic_angle"],
            ),
        ];
        Self::new(concepts.to_vec(), composites.to_vec()).expect("default vocabulary is valid")
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocabulary", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn composites(&self) -> &[Composite] {
        &self.composites
    }
}

/// One annotated reference image: a mask for every vocabulary concept.
#[derive(Debug, Clone)]
pub struct PackEntry {
    pub name: String,
    pub image: GrayImage,
    pub masks: BTreeMap<String, Mask>,
}

/// A set of annotated reference images sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct ReferencePack {
    entries: Vec<PackEntry>,
}

#[derive(Serialize, Deserialize)]
struct PackManifest {
    images: Vec<String>,
}

impl ReferencePack {
    pub fn new(entries: Vec<PackEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidReferencePack("no entries".to_string()));
        }
        for e in &entries {
            for (id, mask) in &e.masks {
                if mask.dimensions() != e.image.dimensions() {
                    return Err(Error::InvalidReferencePack(format!(
                        "mask {id} of {} is {}x{}, image is {}x{}",
                        e.name,
                        mask.width(),
                        mask.height(),
                        e.image.width(),
                        e.image.height()
                    )));
                }
            }
        }
        Ok(ReferencePack { entries })
    }

    /// Check that every entry annotates every vocabulary concept.
    pub fn validate_against(&self, vocab: &ConceptVocabulary) -> Result<()> {
        for e in &self.entries {
            for c in vocab.concepts() {
                if !e.masks.contains_key(&c.id) {
                    return Err(Error::InvalidReferencePack(format!(
                        "{} has no mask for {}",
                        e.name, c.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[PackEntry] {
        &self.entries
    }

    pub fn images(&self) -> Vec<&GrayImage> {
        self.entries.iter().map(|e| &e.image).collect()
    }

    /// Directory convention: `manifest.json` lists image files; each image
    /// `<stem>.pgm` has one mask per concept at `<stem>.<concept_id>.pgm`
    /// with values 0/255.
    pub fn load_dir(dir: impl AsRef<Path>, vocab: &ConceptVocabulary) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: PackManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        let mut entries = Vec::new();
        for file in &manifest.images {
            let img_path = dir.join(file);
            let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let image = crate::image::decode_pgm(&bytes)?;
            let stem = file.trim_end_matches(".pgm");
            let mut masks = BTreeMap::new();
            for c in vocab.concepts() {
                let mask_path = dir.join(format!("{stem}.{}.pgm", c.id));
                let dims = image.dimensions();
                let mask_img = load_image(&mask_path, dims)?;
                masks.insert(c.id.clone(), Mask::from_image(&mask_img));
            }
            entries.push(PackEntry {
                name: stem.to_string(),
                image,
                masks,
            });
        }
        let pack = ReferencePack::new(entries)?;
        pack.validate_against(vocab)?;
        Ok(pack)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = PackManifest {
            images: self
                .entries
                .iter()
                .map(|e| format!("{}.pgm", e.name))
                .collect(),
        };
        let manifest_path = dir.join("manifest.json");
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        for e in &self.entries {
            save_image(&e.image, dir.join(format!("{}.pgm", e.name)))?;
            for (id, mask) in &e.masks {
                save_image(&mask.to_image(), dir.join(format!("{}.{id}.pgm", e.name)))?;
            }
        }
        Ok(())
    }
}

/// How a region's mask was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSource {
    Transferred,
    Refined,
}

/// A named pixel set in target space with its tight bounding box.
#[derive(Debug, Clone)]
pub struct ConceptRegion {
    pub concept_id: String,
    pub mask: Mask,
    pub bbox: BBox,
    pub source: RegionSource,
}

impl ConceptRegion {
    pub fn from_mask(concept_id: &str, mask: Mask, source: RegionSource) -> Result<Self> {
        let bbox = mask_to_bbox(&mask)?;
        Ok(ConceptRegion {
            concept_id: concept_id.to_string(),
            mask,
            bbox,
            source,
        })
    }

    /// Region whose mask is exactly the box interior.
    pub fn from_box(concept_id: &str, bbox: BBox, dims: (u32, u32)) -> Result<Self> {
        let mask = Mask::from_boxes(dims.0, dims.1, &[bbox])?;
        Ok(ConceptRegion {
            concept_id: concept_id.to_string(),
            mask,
            bbox,
            source: RegionSource::Transferred,
        })
    }
}

/// Result of transferring a vocabulary onto one target image.
#[derive(Debug)]
pub struct ConceptTransfer {
    /// Regions for the concepts that received mass, keyed by concept id.
    pub regions: BTreeMap<String, ConceptRegion>,
    /// Index of the reference the selection step picked.
    pub reference_index: usize,
    /// Concepts whose transfer came back empty, in vocabulary order.
    pub absent: Vec<String>,
}

/// Transfer every vocabulary concept from the best-matching pack reference
/// onto the target image.
///
/// Reference selection runs at [`DEFAULT_SELECTION_RESOLUTION`]; the full
/// solve runs at `work_resolution`; each concept's dense core is upsampled
/// back to the target's resolution by nearest neighbor.
pub fn transfer_concepts(
    target: &GrayImage,
    pack: &ReferencePack,
    vocab: &ConceptVocabulary,
    uot: &UotParams,
    work_resolution: (u32, u32),
) -> Result<ConceptTransfer> {
    pack.validate_against(vocab)?;
    let (wr, hr) = work_resolution;
    let candidates: Vec<GrayImage> = pack.images().into_iter().cloned().collect();
    let (reference_index, _costs) =
        select_reference(&candidates, target, uot, DEFAULT_SELECTION_RESOLUTION)?;
    let entry = &pack.entries[reference_index];

    let ref_small = entry.image.resize_bilinear(wr, hr)?;
    let tgt_small = target.resize_bilinear(wr, hr)?;
    let plan = solve_uot(
        &build_distribution(&ref_small),
        &build_distribution(&tgt_small),
        uot,
    )?;

    let mut regions = BTreeMap::new();
    let mut absent = Vec::new();
    for concept in vocab.concepts() {
        let mask_small = entry.masks[&concept.id].resize(wr, hr)?;
        let sources = mask_small.set_indices();
        if sources.is_empty() {
            absent.push(concept.id.clone());
            continue;
        }
        let core = match transfer_region(&plan, &sources, DEFAULT_COVERAGE) {
            Ok(core) => core,
            Err(Error::EmptyTransfer) => {
                absent.push(concept.id.clone());
                continue;
            }
            Err(e) => return Err(e.for_concept(&concept.id)),
        };
        let mut core_mask = Mask::empty(wr, hr)?;
        for &j in &core.pixel_indices {
            core_mask.set_index(j, true);
        }
        let mask = core_mask.upsample_nearest(target.width(), target.height())?;
        let region = ConceptRegion::from_mask(&concept.id, mask, RegionSource::Transferred)
            .map_err(|e| e.for_concept(&concept.id))?;
        regions.insert(concept.id.clone(), region);
    }
    Ok(ConceptTransfer {
        regions,
        reference_index,
        absent,
    })
}

/// Sharpen one region through the box-prompted refinement service.
///
/// A reply the service itself declares failed, or an empty mask, passes the
/// input region through unchanged with a warning; transport-level failures
/// are errors tagged with the concept id.
pub fn refine_region(
    target: &GrayImage,
    region: &ConceptRegion,
    refiner: &dyn RefinerService,
) -> Result<ConceptRegion> {
    let concept = region.concept_id.as_str();
    region
        .bbox
        .check_within(target.width(), target.height())
        .map_err(|e| e.for_concept(concept))?;
    let outcome = refiner
        .refine(target, region.bbox)
        .map_err(|e| e.for_concept(concept))?;
    let mask = match outcome {
        RefineOutcome::Declined(reason) => {
            eprintln!("warning: refiner declined {concept}: {reason}; keeping transferred region");
            return Ok(region.clone());
        }
        RefineOutcome::Mask(mask) => mask,
    };
    if mask.dimensions() != target.dimensions() {
        return Err(Error::ServiceContract(format!(
            "refined mask is {}x{}, image is {}x{}",
            mask.width(),
            mask.height(),
            target.width(),
            target.height()
        ))
        .for_concept(concept));
    }
    if mask.is_empty() {
        eprintln!(
            "warning: refiner returned an empty mask for {concept}; keeping transferred region"
        );
        return Ok(region.clone());
    }
    ConceptRegion::from_mask(concept, mask, RegionSource::Refined)
        .map_err(|e| e.for_concept(concept))
}

/// Refine every region concurrently (up to `in_flight` calls), merging
/// results by concept id.
pub fn refine_all(
    target: &GrayImage,
    regions: &BTreeMap<String, ConceptRegion>,
    refiner: &dyn RefinerService,
    in_flight: usize,
) -> Result<BTreeMap<String, ConceptRegion>> {
    let inputs: Vec<&ConceptRegion> = regions.values().collect();
    let refined = bounded_parallel_map(&inputs, in_flight, |region| {
        refine_region(target, region, refiner)
    });
    let mut out = BTreeMap::new();
    for r in refined {
        let r = r?;
        out.insert(r.concept_id.clone(), r);
    }
    Ok(out)
}
