//! Per-unit offline environments: every view from every reachable pose under
//! the unit's frozen world state.

use crate::error::{Error, Result};
use crate::par;
use crate::segmentation::{UnitId, UnitInstance};
use crate::world::{self, Detection, ObjectClass, Observation, Pose, WorldConfig, WorldState, HEADINGS, PITCHES};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub const STORE_MAGIC: &[u8; 4] = b"UCPS";
pub const STORE_VERSION: u16 = 1;
pub const VIEWS_PER_POINT: usize = HEADINGS.len() * PITCHES.len();

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaStore {
    pub unit_id: UnitId,
    pub frozen_state_hash: String,
    pub reachable_points: BTreeSet<(i32, i32)>,
    pub views: HashMap<Pose, Observation>,
}

impl PanoramaStore {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn contains(&self, pose: &Pose) -> bool {
        self.views.contains_key(pose)
    }

    /// Stored poses in ascending order.
    pub fn poses(&self) -> Vec<Pose> {
        let mut p: Vec<Pose> = self.views.keys().copied().collect();
        p.sort_unstable();
        p
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.write_u16::<LittleEndian>(STORE_VERSION).unwrap();
        write_str(&mut out, &self.unit_id.session_id);
        out.write_u32::<LittleEndian>(self.unit_id.index as u32).unwrap();
        write_str(&mut out, &self.frozen_state_hash);
        out.write_u32::<LittleEndian>(self.reachable_points.len() as u32).unwrap();
        for &(x, y) in &self.reachable_points {
            out.write_i32::<LittleEndian>(x).unwrap();
            out.write_i32::<LittleEndian>(y).unwrap();
        }
        let poses = self.poses();
        out.write_u32::<LittleEndian>(poses.len() as u32).unwrap();
        for pose in poses {
            let rec = encode_observation(&self.views[&pose]);
            out.write_u32::<LittleEndian>(rec.len() as u32).unwrap();
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::StoreFormat(what.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != STORE_VERSION {
            return Err(Error::StoreFormat(format!("unsupported version {version}")));
        }
        let session_id = read_str(&mut r)?;
        let index = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated unit id"))? as usize;
        let frozen_state_hash = read_str(&mut r)?;
        let n_points = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated point count"))?;
        let mut reachable_points = BTreeSet::new();
        for _ in 0..n_points {
            let x = r.read_i32::<LittleEndian>().map_err(|_| bad("truncated point"))?;
            let y = r.read_i32::<LittleEndian>().map_err(|_| bad("truncated point"))?;
            reachable_points.insert((x, y));
        }
        let n_views = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated view count"))?;
        let mut views = HashMap::with_capacity(n_views as usize);
        for _ in 0..n_views {
            let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated record"))? as usize;
            let start = r.position() as usize;
            let rec = bytes
                .get(start..start + len)
                .ok_or_else(|| bad("record overruns file"))?;
            r.set_position((start + len) as u64);
            let obs = decode_observation(rec)?;
            views.insert(obs.pose, obs);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            unit_id: UnitId::new(session_id, index),
            frozen_state_hash,
            reachable_points,
            views,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::StoreFormat("truncated string".into()))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::StoreFormat("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::StoreFormat("string is not utf-8".into()))
}

fn encode_observation(obs: &Observation) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [obs.pose.x, obs.pose.y, obs.pose.hor, obs.pose.ver] {
        out.write_i32::<LittleEndian>(v).unwrap();
    }
    out.write_u16::<LittleEndian>(obs.detections.len() as u16).unwrap();
    for d in &obs.detections {
        out.write_u8(d.label.index() as u8).unwrap();
        for v in d.bbox {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u16::<LittleEndian>(d.region_feature.len() as u16).unwrap();
        for &v in &d.region_feature {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u32::<LittleEndian>(d.instance_id).unwrap();
    }
    out
}

fn decode_observation(rec: &[u8]) -> Result<Observation> {
    let bad = || Error::StoreFormat("truncated observation record".into());
    let mut r = Cursor::new(rec);
    let mut p = [0i32; 4];
    for v in &mut p {
        *v = r.read_i32::<LittleEndian>().map_err(|_| bad())?;
    }
    let n = r.read_u16::<LittleEndian>().map_err(|_| bad())?;
    let mut detections = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let label = r.read_u8().map_err(|_| bad())?;
        let label = ObjectClass::from_index(label as usize)
            .ok_or_else(|| Error::StoreFormat(format!("unknown class index {label}")))?;
        let mut bbox = [0.0; 4];
        for v in &mut bbox {
            *v = r.read_f64::<LittleEndian>().map_err(|_| bad())?;
        }
        let dim = r.read_u16::<LittleEndian>().map_err(|_| bad())?;
        let mut region_feature = Vec::with_capacity(dim as usize);
        for _ in 0..dim {
            region_feature.push(r.read_f64::<LittleEndian>().map_err(|_| bad())?);
        }
        let instance_id = r.read_u32::<LittleEndian>().map_err(|_| bad())?;
        detections.push(Detection {
            label,
            bbox,
            region_feature,
            instance_id,
        });
    }
    if r.position() as usize != rec.len() {
        return Err(Error::StoreFormat("observation record has trailing bytes".into()));
    }
    Ok(Observation {
        pose: Pose::new(p[0], p[1], p[2], p[3]),
        detections,
    })
}

/// Renders all 16 views of every cell reachable from the agent in `state`.
pub fn build_store_for_state(unit_id: UnitId, state: &WorldState, cfg: &WorldConfig) -> PanoramaStore {
    let reachable_points: BTreeSet<(i32, i32)> = state.grid.reachable_from(state.agent.cell()).into_iter().collect();
    let mut probe = state.clone();
    let mut views = HashMap::with_capacity(reachable_points.len() * VIEWS_PER_POINT);
    for &(x, y) in &reachable_points {
        for hor in HEADINGS {
            for ver in PITCHES {
                probe.agent = Pose::new(x, y, hor, ver);
                views.insert(probe.agent, world::observe(&probe, cfg));
            }
        }
    }
    PanoramaStore {
        unit_id,
        frozen_state_hash: state.frozen_hash(),
        reachable_points,
        views,
    }
}

pub fn build_store(unit: &UnitInstance, cfg: &WorldConfig) -> Result<PanoramaStore> {
    let store = build_store_for_state(unit.unit_id.clone(), &unit.initial_state, cfg);
    if !store.contains(&unit.target_pose) {
        return Err(Error::NoPath {
            from: unit.start_pose(),
            to: unit.target_pose,
        });
    }
    Ok(store)
}

pub fn env_lookup<'a>(store: &'a PanoramaStore, pose: &Pose) -> Result<&'a Observation> {
    store.views.get(pose).ok_or(Error::EnvMiss(*pose))
}

/// Builds stores for many units, in parallel when enabled.
pub fn build_stores(units: &[UnitInstance], cfg: &WorldConfig) -> Result<Vec<PanoramaStore>> {
    par::map(units, |u| build_store(u, cfg)).into_iter().collect()
}

pub fn build_stores_sequential(units: &[UnitInstance], cfg: &WorldConfig) -> Result<Vec<PanoramaStore>> {
    par::map_sequential(units, |u| build_store(u, cfg)).into_iter().collect()
}

pub fn store_path(dir: &Path, unit_id: &UnitId) -> PathBuf {
    dir.join(format!("{}.ucps", unit_id.key()))
}

/// Lazily built stores keyed by unit id, optionally persisted to disk.
#[derive(Debug)]
pub struct StoreCache {
    dir: Option<PathBuf>,
    cfg: WorldConfig,
    stores: Mutex<HashMap<UnitId, Arc<PanoramaStore>>>,
}

impl StoreCache {
    pub fn in_memory(cfg: WorldConfig) -> Self {
        Self {
            dir: None,
            cfg,
            stores: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>, cfg: WorldConfig) -> Self {
        Self {
            dir: Some(dir.into()),
            cfg,
            stores: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.stores.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, store: PanoramaStore) -> Arc<PanoramaStore> {
        let store = Arc::new(store);
        self.stores
            .lock()
            .unwrap()
            .insert(store.unit_id.clone(), store.clone());
        store
    }

    /// Returns the store for `unit`, loading or building it on first use.
    /// A persisted store whose hash disagrees with the unit is rebuilt.
    pub fn get(&self, unit: &UnitInstance) -> Result<Arc<PanoramaStore>> {
        if let Some(s) = self.stores.lock().unwrap().get(&unit.unit_id) {
            return Ok(s.clone());
        }
        let hash = unit.initial_state.frozen_hash();
        if let Some(dir) = &self.dir {
            let path = store_path(dir, &unit.unit_id);
            if path.exists() {
                let s = PanoramaStore::load(&path)?;
                if s.frozen_state_hash == hash && s.unit_id == unit.unit_id {
                    return Ok(self.insert(s));
                }
            }
        }
        let s = build_store(unit, &self.cfg)?;
        if let Some(dir) = &self.dir {
            s.save(&store_path(dir, &unit.unit_id))?;
        }
        Ok(self.insert(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Grid, ObjectInstance};

    fn state(rows: &[&str], agent: Pose) -> WorldState {
        WorldState {
            scene_id: "t".into(),
            grid: Grid::from_rows(rows).unwrap(),
            objects: vec![
                ObjectInstance::new(0, ObjectClass::Apple, (2, 2)),
                ObjectInstance::new(1, ObjectClass::Fridge, (0, 2)),
            ],
            agent,
            inventory: None,
        }
    }

    #[test]
    fn open_room_has_144_views() {
        let s = state(&["...", "...", "..."], Pose::new(1, 1, 90, 0));
        let store = build_store_for_state(UnitId::new("t", 0), &s, &WorldConfig::default());
        assert_eq!(store.reachable_points.len(), 9);
        assert_eq!(store.len(), 144);
    }

    #[test]
    fn sealed_pocket_is_excluded() {
        let s = state(&["..#.", "..#.", "..##"], Pose::new(0, 0, 0, 0));
        let store = build_store_for_state(UnitId::new("t", 0), &s, &WorldConfig::default());
        assert!(!store.reachable_points.contains(&(3, 0)));
        assert_eq!(store.reachable_points.len(), 6);
        assert_eq!(store.len(), 6 * VIEWS_PER_POINT);
    }

    #[test]
    fn lookup_matches_live_and_misses_outside() {
        let cfg = WorldConfig::default();
        let s = state(&["..#.", "....", "...."], Pose::new(0, 0, 0, 0));
        let store = build_store_for_state(UnitId::new("t", 0), &s, &cfg);
        for pose in store.poses() {
            let mut live = s.clone();
            live.agent = pose;
            assert_eq!(env_lookup(&store, &pose).unwrap(), &world::observe(&live, &cfg));
        }
        assert!(matches!(env_lookup(&store, &Pose::new(2, 0, 0, 0)), Err(Error::EnvMiss(_))));
        assert!(env_lookup(&store, &Pose::new(9, 9, 0, 0)).is_err());
    }

    #[test]
    fn bytes_roundtrip_and_rejects_garbage() {
        let s = state(&["...", "...", "..."], Pose::new(1, 1, 90, 0));
        let store = build_store_for_state(UnitId::new("t", 3), &s, &WorldConfig::default());
        let bytes = store.to_bytes();
        assert_eq!(PanoramaStore::from_bytes(&bytes).unwrap(), store);
        assert_eq!(store.to_bytes(), bytes);
        assert!(PanoramaStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(PanoramaStore::from_bytes(&wrong).is_err());
    }

    #[test]
    fn cache_builds_once_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let session = crate::scenegen::generate_session(&Default::default()).unwrap();
        let units = crate::segmentation::segment_units(&session, &WorldConfig::default()).unwrap();
        let cache = StoreCache::on_disk(dir.path(), WorldConfig::default());
        let a = cache.get(&units[0]).unwrap();
        let b = cache.get(&units[0]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let fresh = StoreCache::on_disk(dir.path(), WorldConfig::default());
        assert_eq!(*fresh.get(&units[0]).unwrap(), *a);
    }
}
