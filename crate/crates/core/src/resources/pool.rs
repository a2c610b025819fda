//! Resource sets and the slot scheduler.
//!
//! Every node is cut into the same number of slots; a slot is one resource
//! set (rset) carrying `cores / slots` cores and `devices / slots` GPU
//! devices. A request is converted into a count of rsets and placed on the
//! fewest nodes that can take an even share each.

use std::collections::{BTreeMap, HashMap};

use super::{NodeInventory, PlatformSpec, ResourceError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceSet {
    pub rset_id: usize,
    pub node_index: usize,
    /// Position within the node, `0..slots_per_node`.
    pub slot: usize,
    pub cores: u32,
    pub gpus: u32,
    pub free: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SetsOptions {
    /// Treat each GPU tile as a schedulable device.
    pub use_tiles: bool,
}

/// Partitions the inventory into one resource set per simulation worker.
///
/// The simulation worker count (`num_workers`, minus one when a worker is
/// dedicated to a persistent generator) must be a multiple of the node
/// count, and each node's cores and devices must split evenly over its
/// slots.
pub fn build_resource_sets(
    inventory: &NodeInventory,
    platform: &PlatformSpec,
    num_workers: usize,
    dedicated_gen: bool,
    opts: SetsOptions,
) -> Result<Vec<ResourceSet>, ResourceError> {
    let sim_workers = num_workers.saturating_sub(dedicated_gen as usize);
    if sim_workers == 0 {
        return Err(ResourceError::UnevenPartition(
            "no simulation workers to give resource sets to".into(),
        ));
    }
    let nnodes = inventory.nodes.len();
    if sim_workers % nnodes != 0 {
        return Err(ResourceError::UnevenPartition(format!(
            "{sim_workers} simulation workers do not divide over {nnodes} nodes"
        )));
    }
    let slots = sim_workers / nnodes;
    let tiles = if opts.use_tiles {
        platform.tiles_per_gpu.max(1)
    } else {
        1
    };
    let mut out = Vec::with_capacity(sim_workers);
    for (node_index, node) in inventory.nodes.iter().enumerate() {
        let devices = node.gpus * tiles;
        if node.cores as usize % slots != 0 {
            return Err(ResourceError::UnevenPartition(format!(
                "node {} has {} cores, not divisible into {slots} slots",
                node.name, node.cores
            )));
        }
        if devices as usize % slots != 0 {
            return Err(ResourceError::UnevenPartition(format!(
                "node {} has {devices} GPU devices, not divisible into {slots} slots",
                node.name
            )));
        }
        for slot in 0..slots {
            out.push(ResourceSet {
                rset_id: out.len(),
                node_index,
                slot,
                cores: node.cores / slots as u32,
                gpus: devices / slots as u32,
                free: true,
            });
        }
    }
    Ok(out)
}

/// Portable resource request. Unset fields are inferred.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResourceRequest {
    pub num_procs: Option<u32>,
    pub num_nodes: Option<u32>,
    pub procs_per_node: Option<u32>,
    pub num_gpus: Option<u32>,
}

impl ResourceRequest {
    pub fn procs(n: u32) -> Self {
        Self {
            num_procs: Some(n),
            ..Default::default()
        }
    }

    pub fn gpus(n: u32) -> Self {
        Self {
            num_gpus: Some(n),
            ..Default::default()
        }
    }

    /// Request carried by a history record (zero meaning unspecified).
    pub fn from_record(num_procs: u32, num_gpus: u32) -> Self {
        Self {
            num_procs: (num_procs > 0).then_some(num_procs),
            num_gpus: (num_gpus > 0).then_some(num_gpus),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Returns (explicit procs, fixed node count, gpus) after consistency
    /// checks.
    fn resolve(&self) -> Result<(Option<u32>, Option<u32>, u32), ResourceError> {
        let bad = |m: String| Err(ResourceError::InvalidRequest(m));
        if self.num_procs == Some(0) || self.num_nodes == Some(0) || self.procs_per_node == Some(0)
        {
            return bad("counts must be positive".into());
        }
        let gpus = self.num_gpus.unwrap_or(0);
        match (self.num_procs, self.num_nodes, self.procs_per_node) {
            (p, Some(n), Some(ppn)) => {
                if let Some(p) = p {
                    if p != n * ppn {
                        return bad(format!(
                            "num_procs {p} != num_nodes {n} x procs_per_node {ppn}"
                        ));
                    }
                }
                Ok((Some(n * ppn), Some(n), gpus))
            }
            (Some(p), None, Some(ppn)) => {
                if p % ppn != 0 {
                    return bad(format!("num_procs {p} not a multiple of procs_per_node {ppn}"));
                }
                Ok((Some(p), Some(p / ppn), gpus))
            }
            (None, None, Some(_)) => bad("procs_per_node needs num_procs or num_nodes".into()),
            (p, n, None) => Ok((p, n, gpus)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub split2fit: bool,
    pub match_slots: bool,
}

impl ScheduleOptions {
    pub fn for_platform(platform: &PlatformSpec) -> Self {
        Self {
            split2fit: true,
            match_slots: platform.scheduler_match_slots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAssignment {
    pub node_index: usize,
    pub node: String,
    pub slots: Vec<usize>,
    pub gpu_ids: Vec<u32>,
    pub procs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub id: u64,
    pub nodes: Vec<NodeAssignment>,
    pub rset_ids: Vec<usize>,
    pub total_procs: u32,
    pub total_gpus: u32,
}

impl Assignment {
    /// A single-node placement that did not come from a pool (resource
    /// management disabled).
    pub fn local(procs: u32) -> Self {
        Self {
            id: 0,
            nodes: vec![NodeAssignment {
                node_index: 0,
                node: "localhost".into(),
                slots: vec![0],
                gpu_ids: Vec::new(),
                procs,
            }],
            rset_ids: Vec::new(),
            total_procs: procs,
            total_gpus: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Free/used bookkeeping over a fixed list of resource sets.
#[derive(Debug, Clone)]
pub struct ResourcePool {
    node_names: Vec<String>,
    slots_per_node: usize,
    rsets: Vec<ResourceSet>,
    /// rset ids indexed by (node, slot)
    by_node: Vec<Vec<usize>>,
    live: HashMap<u64, Vec<usize>>,
    next_id: u64,
}

/// Internal placement plan before it is committed.
struct Plan {
    nodes: Vec<(usize, Vec<usize>)>,
    procs: u32,
}

/// Cap on slot subsets enumerated for matched-slot placement; above it a
/// candidate set is taken from each node's lowest free slots.
const MATCH_ENUM_LIMIT: u64 = 50_000;

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u64) / (i as u64 + 1);
    }
    acc
}

/// Calls `f` on every `k`-subset of `items` in lexicographic order; stops
/// early when `f` returns true.
fn for_each_subset(items: &[usize], k: usize, f: &mut dyn FnMut(&[usize]) -> bool) {
    fn rec(
        items: &[usize],
        k: usize,
        start: usize,
        cur: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]) -> bool,
    ) -> bool {
        if cur.len() == k {
            return f(cur);
        }
        let need = k - cur.len();
        for i in start..=items.len().saturating_sub(need) {
            if i >= items.len() {
                break;
            }
            cur.push(items[i]);
            if rec(items, k, i + 1, cur, f) {
                return true;
            }
            cur.pop();
        }
        false
    }
    rec(items, k, 0, &mut Vec::with_capacity(k), f);
}

impl ResourcePool {
    pub fn new(inventory: &NodeInventory, rsets: Vec<ResourceSet>) -> Self {
        let node_names: Vec<String> = inventory.nodes.iter().map(|n| n.name.clone()).collect();
        let mut by_node = vec![Vec::new(); node_names.len()];
        for r in &rsets {
            let v = &mut by_node[r.node_index];
            if v.len() <= r.slot {
                v.resize(r.slot + 1, usize::MAX);
            }
            v[r.slot] = r.rset_id;
        }
        let slots_per_node = by_node.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            node_names,
            slots_per_node,
            rsets,
            by_node,
            live: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn build(
        inventory: &NodeInventory,
        platform: &PlatformSpec,
        num_workers: usize,
        dedicated_gen: bool,
        opts: SetsOptions,
    ) -> Result<Self, ResourceError> {
        let rsets = build_resource_sets(inventory, platform, num_workers, dedicated_gen, opts)?;
        Ok(Self::new(inventory, rsets))
    }

    pub fn rsets(&self) -> &[ResourceSet] {
        &self.rsets
    }

    pub fn slots_per_node(&self) -> usize {
        self.slots_per_node
    }

    pub fn free_count(&self) -> usize {
        self.rsets.iter().filter(|r| r.free).count()
    }

    pub fn live_assignments(&self) -> usize {
        self.live.len()
    }

    /// Total (cores, gpus) over free rsets.
    pub fn free_totals(&self) -> (u64, u64) {
        self.rsets.iter().filter(|r| r.free).fold((0, 0), |(c, g), r| {
            (c + r.cores as u64, g + r.gpus as u64)
        })
    }

    /// Total (cores, gpus) held by live assignments.
    pub fn live_totals(&self) -> (u64, u64) {
        self.live
            .values()
            .flatten()
            .fold((0, 0), |(c, g), &id| {
                let r = &self.rsets[id];
                (c + r.cores as u64, g + r.gpus as u64)
            })
    }

    fn free_slots(&self, node: usize, free_view: &dyn Fn(usize) -> bool) -> Vec<usize> {
        self.by_node[node]
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != usize::MAX && free_view(id))
            .map(|(slot, _)| slot)
            .collect()
    }

    /// Groups nodes by per-rset shape, in order of first node index.
    fn groups(&self) -> Vec<((u32, u32), Vec<usize>)> {
        let mut groups: Vec<((u32, u32), Vec<usize>)> = Vec::new();
        for (node, ids) in self.by_node.iter().enumerate() {
            let Some(&first) = ids.iter().find(|&&id| id != usize::MAX) else {
                continue;
            };
            let shape = (self.rsets[first].cores, self.rsets[first].gpus);
            match groups.iter_mut().find(|(s, _)| *s == shape) {
                Some((_, nodes)) => nodes.push(node),
                None => groups.push((shape, vec![node])),
            }
        }
        groups
    }

    fn plan(
        &self,
        req: &ResourceRequest,
        opts: ScheduleOptions,
        free_view: &dyn Fn(usize) -> bool,
    ) -> Result<Option<Plan>, ResourceError> {
        let (explicit_procs, fixed_nodes, gpus) = req.resolve()?;
        let mut groups = self.groups();
        // CPU-only requests go to CPU-only rsets first; GPU requests need GPUs
        if gpus > 0 {
            groups.retain(|((_, g), _)| *g > 0);
        } else {
            groups.sort_by_key(|((_, g), nodes)| (*g > 0, nodes[0]));
        }
        for ((cores, rset_gpus), nodes) in groups {
            let mut k = 1u32;
            if let Some(p) = explicit_procs {
                k = k.max(p.div_ceil(cores));
            }
            if gpus > 0 {
                k = k.max(gpus.div_ceil(rset_gpus));
            }
            let procs = match (explicit_procs, gpus) {
                (Some(p), _) => p,
                (None, g) if g > 0 => g,
                (None, _) => match fixed_nodes {
                    Some(n) => n,
                    None => k * cores,
                },
            };
            let per_node_cap = self.slots_per_node as u32;
            let candidates: Vec<u32> = match fixed_nodes {
                Some(n) => {
                    let k_n = k.div_ceil(n) * n;
                    k = k_n;
                    vec![n]
                }
                None => {
                    let lo = k.div_ceil(per_node_cap.max(1)).max(1);
                    let hi = (nodes.len() as u32).min(k);
                    (lo..=hi).collect()
                }
            };
            let even = |m: u32| k % m == 0 && procs % m == 0;
            let mut first = true;
            for m in candidates {
                if !even(m) {
                    continue;
                }
                if !first && !opts.split2fit {
                    break;
                }
                first = false;
                let per = (k / m) as usize;
                if per > self.slots_per_node || m as usize > nodes.len() {
                    continue;
                }
                let chosen = if opts.match_slots && m > 1 {
                    self.pick_matched(&nodes, m as usize, per, free_view)
                } else {
                    self.pick_any(&nodes, m as usize, per, free_view)
                };
                if let Some(nodes) = chosen {
                    return Ok(Some(Plan { nodes, procs }));
                }
            }
        }
        Ok(None)
    }

    fn pick_any(
        &self,
        nodes: &[usize],
        m: usize,
        per: usize,
        free_view: &dyn Fn(usize) -> bool,
    ) -> Option<Vec<(usize, Vec<usize>)>> {
        let picked: Vec<(usize, Vec<usize>)> = nodes
            .iter()
            .filter_map(|&n| {
                let free = self.free_slots(n, free_view);
                (free.len() >= per).then(|| (n, free[..per].to_vec()))
            })
            .take(m)
            .collect();
        (picked.len() == m).then_some(picked)
    }

    /// Finds `m` nodes sharing a common set of `per` free slots. Prefers the
    /// lexicographically smallest node list, then the smallest slot set.
    fn pick_matched(
        &self,
        nodes: &[usize],
        m: usize,
        per: usize,
        free_view: &dyn Fn(usize) -> bool,
    ) -> Option<Vec<(usize, Vec<usize>)>> {
        let free: BTreeMap<usize, Vec<usize>> = nodes
            .iter()
            .map(|&n| (n, self.free_slots(n, free_view)))
            .filter(|(_, f)| f.len() >= per)
            .collect();
        if free.len() < m {
            return None;
        }
        let mut best: Option<(Vec<usize>, Vec<usize>)> = None;
        let mut consider = |slots: &[usize]| {
            let holders: Vec<usize> = free
                .iter()
                .filter(|(_, f)| slots.iter().all(|s| f.binary_search(s).is_ok()))
                .map(|(&n, _)| n)
                .take(m)
                .collect();
            if holders.len() == m {
                let cand = (holders, slots.to_vec());
                if best.as_ref().is_none_or(|b| cand < *b) {
                    best = Some(cand);
                }
            }
        };
        let all_slots: Vec<usize> = (0..self.slots_per_node).collect();
        if binomial(self.slots_per_node, per) <= MATCH_ENUM_LIMIT {
            for_each_subset(&all_slots, per, &mut |s| {
                consider(s);
                false
            });
        } else {
            let seeds: Vec<Vec<usize>> = free.values().map(|f| f[..per].to_vec()).collect();
            for s in seeds {
                consider(&s);
            }
        }
        best.map(|(holders, slots)| holders.into_iter().map(|n| (n, slots.clone())).collect())
    }

    /// Places `req` on free resource sets and marks them used.
    pub fn schedule(
        &mut self,
        req: &ResourceRequest,
        opts: ScheduleOptions,
    ) -> Result<Assignment, ResourceError> {
        let rsets = &self.rsets;
        let plan = self.plan(req, opts, &|id| rsets[id].free)?;
        let Some(plan) = plan else {
            let ever = self.plan(req, opts, &|_| true)?.is_some();
            return Err(ResourceError::Insufficient { ever });
        };
        let m = plan.nodes.len() as u32;
        let mut nodes = Vec::with_capacity(plan.nodes.len());
        let mut rset_ids = Vec::new();
        let mut total_gpus = 0;
        for (node_index, slots) in plan.nodes {
            let mut gpu_ids = Vec::new();
            for &slot in &slots {
                let id = self.by_node[node_index][slot];
                let r = &mut self.rsets[id];
                debug_assert!(r.free);
                r.free = false;
                gpu_ids.extend((0..r.gpus).map(|g| slot as u32 * r.gpus + g));
                rset_ids.push(id);
            }
            total_gpus += gpu_ids.len() as u32;
            nodes.push(NodeAssignment {
                node_index,
                node: self.node_names[node_index].clone(),
                slots,
                gpu_ids,
                procs: plan.procs / m,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.live.insert(id, rset_ids.clone());
        Ok(Assignment {
            id,
            nodes,
            rset_ids,
            total_procs: plan.procs,
            total_gpus,
        })
    }

    pub fn release(&mut self, assignment: &Assignment) -> Result<(), ResourceError> {
        let ids = self
            .live
            .remove(&assignment.id)
            .ok_or(ResourceError::NotLive(assignment.id))?;
        for id in ids {
            self.rsets[id].free = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::{detect_platform, NodeInventory};

    fn generic() -> PlatformSpec {
        detect_platform(&Default::default(), &Default::default(), None).unwrap()
    }

    fn opts(match_slots: bool) -> ScheduleOptions {
        ScheduleOptions {
            split2fit: true,
            match_slots,
        }
    }

    #[test]
    fn even_division_within_node() {
        let inv = NodeInventory::uniform(&["n0"], 64, 8).unwrap();
        let r = build_resource_sets(&inv, &generic(), 4, false, Default::default()).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|s| s.cores == 16 && s.gpus == 2));
        assert_eq!(r.iter().map(|s| s.slot).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_rset_per_node() {
        let inv = NodeInventory::uniform(&["a", "b"], 8, 0).unwrap();
        let r = build_resource_sets(&inv, &generic(), 2, false, Default::default()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].node_index, r[0].slot), (0, 0));
        assert_eq!((r[1].node_index, r[1].slot), (1, 0));
    }

    #[test]
    fn uneven_split_rejected() {
        let inv = NodeInventory::uniform(&["n0"], 64, 0).unwrap();
        assert!(matches!(
            build_resource_sets(&inv, &generic(), 3, false, Default::default()),
            Err(ResourceError::UnevenPartition(_))
        ));
        // a dedicated generator worker holds no rset: 5 workers -> 4 rsets
        let r = build_resource_sets(&inv, &generic(), 5, true, Default::default()).unwrap();
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn tiles_as_devices() {
        let aurora = detect_platform(&Default::default(), &Default::default(), Some("aurora"))
            .unwrap();
        let inv = NodeInventory::uniform(&["x0"], 104, 6).unwrap();
        let r = build_resource_sets(&inv, &aurora, 4, false, SetsOptions { use_tiles: true })
            .unwrap();
        assert!(r.iter().all(|s| s.gpus == 3 && s.cores == 26));
        assert!(build_resource_sets(&inv, &aurora, 4, false, Default::default()).is_err());
    }

    #[test]
    fn gpu_request_on_one_node() {
        let inv = NodeInventory::uniform(&["n0", "n1"], 64, 8).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 16, false, Default::default())
            .unwrap();
        let a = pool.schedule(&ResourceRequest::gpus(4), opts(true)).unwrap();
        assert_eq!(a.num_nodes(), 1);
        assert_eq!(a.nodes[0].node, "n0");
        assert_eq!(a.nodes[0].slots, vec![0, 1, 2, 3]);
        assert_eq!(a.nodes[0].gpu_ids, vec![0, 1, 2, 3]);
        assert_eq!(a.total_gpus, 4);
        assert_eq!(a.total_procs, 4);
    }

    #[test]
    fn matched_slots_across_nodes() {
        let inv = NodeInventory::uniform(&["n0", "n1"], 64, 8).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 16, false, Default::default())
            .unwrap();
        // occupy slots 4..8 on both nodes
        let a0 = pool.schedule(&ResourceRequest::gpus(8), opts(true)).unwrap();
        pool.release(&a0).unwrap();
        for node in 0..2 {
            for slot in 4..8 {
                let id = pool.by_node[node][slot];
                pool.rsets[id].free = false;
            }
        }
        let a = pool.schedule(&ResourceRequest::gpus(8), opts(true)).unwrap();
        assert_eq!(a.num_nodes(), 2);
        assert_eq!(a.nodes[0].slots, vec![0, 1, 2, 3]);
        assert_eq!(a.nodes[1].slots, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matched_slots_avoid_misaligned_nodes() {
        let inv = NodeInventory::uniform(&["n0", "n1", "n2"], 4, 4).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 12, false, Default::default())
            .unwrap();
        // n0 free {0,1}, n1 free {2,3}, n2 free {0,1}
        for (node, slot) in [(0, 2), (0, 3), (1, 0), (1, 1), (2, 2), (2, 3)] {
            let id = pool.by_node[node][slot];
            pool.rsets[id].free = false;
        }
        let a = pool.schedule(&ResourceRequest::gpus(4), opts(true)).unwrap();
        let names: Vec<_> = a.nodes.iter().map(|n| n.node.as_str()).collect();
        assert_eq!(names, vec!["n0", "n2"]);
        pool.release(&a).unwrap();
        let b = pool.schedule(&ResourceRequest::gpus(4), opts(false)).unwrap();
        let names: Vec<_> = b.nodes.iter().map(|n| n.node.as_str()).collect();
        assert_eq!(names, vec!["n0", "n1"]);
    }

    #[test]
    fn insufficient_resources() {
        let inv = NodeInventory::uniform(&["n0"], 8, 2).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 2, false, Default::default())
            .unwrap();
        assert_eq!(
            pool.schedule(&ResourceRequest::gpus(3), opts(true)),
            Err(ResourceError::Insufficient { ever: false })
        );
        let a = pool.schedule(&ResourceRequest::gpus(2), opts(true)).unwrap();
        assert_eq!(
            pool.schedule(&ResourceRequest::gpus(1), opts(true)),
            Err(ResourceError::Insufficient { ever: true })
        );
        pool.release(&a).unwrap();
    }

    #[test]
    fn no_split2fit_sticks_to_minimum() {
        let inv = NodeInventory::uniform(&["n0", "n1", "n2", "n3"], 4, 0).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 8, false, Default::default())
            .unwrap();
        // take one rset on n0 and n1 so a 2-node x 2-slot split is impossible
        for node in [0, 1] {
            let id = pool.by_node[node][0];
            pool.rsets[id].free = false;
        }
        for node in [2] {
            let id = pool.by_node[node][1];
            pool.rsets[id].free = false;
        }
        let req = ResourceRequest::procs(8);
        let strict = ScheduleOptions {
            split2fit: false,
            match_slots: false,
        };
        assert!(pool.schedule(&req, strict).is_err());
        let a = pool.schedule(&req, opts(false)).unwrap();
        assert_eq!(a.num_nodes(), 4);
        assert!(a.nodes.iter().all(|n| n.procs == 2));
    }

    #[test]
    fn cpu_requests_prefer_cpu_only_nodes() {
        let inv = NodeInventory::new(vec![
            crate::resources::Node {
                name: "gpu0".into(),
                cores: 8,
                gpus: 4,
            },
            crate::resources::Node {
                name: "cpu0".into(),
                cores: 8,
                gpus: 0,
            },
        ])
        .unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 8, false, Default::default())
            .unwrap();
        let a = pool.schedule(&ResourceRequest::procs(2), opts(true)).unwrap();
        assert_eq!(a.nodes[0].node, "cpu0");
        assert_eq!(a.total_gpus, 0);
        let g = pool.schedule(&ResourceRequest::gpus(2), opts(true)).unwrap();
        assert_eq!(g.nodes[0].node, "gpu0");
    }

    #[test]
    fn request_consistency() {
        let bad = ResourceRequest {
            num_procs: Some(5),
            num_nodes: Some(2),
            procs_per_node: Some(2),
            num_gpus: None,
        };
        assert!(matches!(bad.resolve(), Err(ResourceError::InvalidRequest(_))));
        let ok = ResourceRequest {
            num_procs: None,
            num_nodes: Some(2),
            procs_per_node: Some(4),
            num_gpus: None,
        };
        assert_eq!(ok.resolve().unwrap(), (Some(8), Some(2), 0));
    }

    #[test]
    fn fixed_node_count_honoured() {
        let inv = NodeInventory::uniform(&["a", "b", "c"], 16, 0).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 12, false, Default::default())
            .unwrap();
        let req = ResourceRequest {
            num_procs: None,
            num_nodes: Some(2),
            procs_per_node: Some(4),
            num_gpus: None,
        };
        let a = pool.schedule(&req, opts(false)).unwrap();
        assert_eq!(a.num_nodes(), 2);
        assert_eq!(a.total_procs, 8);
        assert!(a.nodes.iter().all(|n| n.procs == 4));
    }

    #[test]
    fn release_twice_fails() {
        let inv = NodeInventory::uniform(&["n0"], 8, 0).unwrap();
        let mut pool = ResourcePool::build(&inv, &generic(), 2, false, Default::default())
            .unwrap();
        let before: Vec<bool> = pool.rsets().iter().map(|r| r.free).collect();
        let a = pool.schedule(&ResourceRequest::procs(4), opts(false)).unwrap();
        pool.release(&a).unwrap();
        let after: Vec<bool> = pool.rsets().iter().map(|r| r.free).collect();
        assert_eq!(before, after);
        assert_eq!(pool.release(&a), Err(ResourceError::NotLive(a.id)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conservation_under_interleaving(
                nodes in 1usize..4, slots in 1usize..6, gpus_per_slot in 0u32..3,
                ops in proptest::collection::vec((0u8..3, 1u32..12, 0u32..6, any::<bool>()), 1..60),
            ) {
                let names: Vec<String> = (0..nodes).map(|i| format!("n{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let inv = NodeInventory::uniform(&refs, 4 * slots as u32, gpus_per_slot * slots as u32).unwrap();
                let mut pool = ResourcePool::build(&inv, &generic(), nodes * slots, false, Default::default()).unwrap();
                let total = (inv.total_cores(), inv.total_gpus());
                let mut live: Vec<Assignment> = Vec::new();
                for (kind, procs, gpus, ms) in ops {
                    if kind < 2 || live.is_empty() {
                        let req = ResourceRequest {
                            num_procs: Some(procs),
                            num_gpus: (gpus > 0).then_some(gpus),
                            ..Default::default()
                        };
                        if let Ok(a) = pool.schedule(&req, opts(ms)) {
                            live.push(a);
                        }
                    } else {
                        let a = live.remove(procs as usize % live.len());
                        pool.release(&a).unwrap();
                    }
                    let (fc, fg) = pool.free_totals();
                    let (lc, lg) = pool.live_totals();
                    prop_assert_eq!((fc + lc, fg + lg), total);
                }
            }
        }
    }
}
