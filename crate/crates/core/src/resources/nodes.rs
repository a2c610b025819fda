//! Node inventories: scheduler node-list parsing and inventory files.

use std::collections::HashMap;
use std::path::Path;

use super::ResourceError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInventory {
    pub nodes: Vec<Node>,
}

impl NodeInventory {
    pub fn new(nodes: Vec<Node>) -> Result<Self, ResourceError> {
        if nodes.is_empty() {
            return Err(ResourceError::Inventory {
                line: 0,
                msg: "inventory has no nodes".into(),
            });
        }
        if let Some(n) = nodes.iter().find(|n| n.cores == 0) {
            return Err(ResourceError::Inventory {
                line: 0,
                msg: format!("node {} has no cores", n.name),
            });
        }
        Ok(Self { nodes })
    }

    pub fn uniform(names: &[&str], cores: u32, gpus: u32) -> Result<Self, ResourceError> {
        Self::new(
            names
                .iter()
                .map(|n| Node {
                    name: n.to_string(),
                    cores,
                    gpus,
                })
                .collect(),
        )
    }

    /// Replaces per-node counts, e.g. with a known platform's values.
    pub fn with_shape(mut self, cores: u32, gpus: u32) -> Self {
        for n in &mut self.nodes {
            n.cores = cores;
            n.gpus = gpus;
        }
        self
    }

    pub fn total_cores(&self) -> u64 {
        self.nodes.iter().map(|n| n.cores as u64).sum()
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes.iter().map(|n| n.gpus as u64).sum()
    }
}

/// Splits on commas that are not inside brackets.
fn split_top_level(s: &str) -> Result<Vec<&str>, String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => {
                if depth > 0 {
                    return Err("nested brackets".into());
                }
                depth += 1
            }
            ']' => {
                if depth == 0 {
                    return Err("unmatched ']'".into());
                }
                depth -= 1
            }
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unclosed '['".into());
    }
    out.push(&s[start..]);
    Ok(out)
}

fn expand_range_list(body: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for part in body.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err("empty range element".into());
        }
        match part.split_once('-') {
            Some((a, b)) => {
                let lo: u64 = a.parse().map_err(|_| format!("bad range start {a:?}"))?;
                let hi: u64 = b.parse().map_err(|_| format!("bad range end {b:?}"))?;
                if hi < lo {
                    return Err(format!("descending range {part:?}"));
                }
                let width = a.len();
                for v in lo..=hi {
                    out.push(format!("{v:0width$}"));
                }
            }
            None => {
                if !part.chars().all(|c| c.is_ascii_digit()) {
                    return Err(format!("bad range element {part:?}"));
                }
                out.push(part.to_string());
            }
        }
    }
    Ok(out)
}

/// Expands one host expression such as `nid[001-003]` or `r[1-2]n[1,3]`.
fn expand_item(item: &str) -> Result<Vec<String>, String> {
    let Some(open) = item.find('[') else {
        return Ok(vec![item.to_string()]);
    };
    let close = item[open..]
        .find(']')
        .map(|c| c + open)
        .ok_or("unclosed '['")?;
    let prefix = &item[..open];
    let values = expand_range_list(&item[open + 1..close])?;
    let rest = expand_item(&item[close + 1..])?;
    let mut out = Vec::with_capacity(values.len() * rest.len());
    for v in &values {
        for r in &rest {
            out.push(format!("{prefix}{v}{r}"));
        }
    }
    Ok(out)
}

/// Expands a compressed scheduler node list (`nid[000001-000003],login1`).
/// Zero padding of the range start is preserved.
pub fn parse_nodelist(s: &str) -> Result<Vec<String>, ResourceError> {
    let err = |msg: String| ResourceError::NodeList {
        input: s.to_string(),
        msg,
    };
    let s = s.trim();
    if s.is_empty() {
        return Err(err("empty node list".into()));
    }
    let mut names = Vec::new();
    for item in split_top_level(s).map_err(err)? {
        let item = item.trim();
        if item.is_empty() {
            return Err(err("empty host entry".into()));
        }
        names.extend(expand_item(item).map_err(err)?);
    }
    Ok(names)
}

fn dedup_in_order(names: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    names
        .into_iter()
        .filter(|n| seen.insert(n.clone()))
        .collect()
}

fn local_cores() -> u32 {
    std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .unwrap_or(1)
}

/// Node names from whichever scheduler family left variables in `env`.
fn scheduler_nodes(env: &HashMap<String, String>) -> Result<Option<Vec<String>>, ResourceError> {
    for var in ["SLURM_JOB_NODELIST", "SLURM_NODELIST"] {
        if let Some(v) = env.get(var) {
            return parse_nodelist(v).map(Some);
        }
    }
    if let Some(file) = env.get("PBS_NODEFILE") {
        let text =
            std::fs::read_to_string(file).map_err(|e| ResourceError::Io(format!("{file}: {e}")))?;
        let names = dedup_in_order(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
        if names.is_empty() {
            return Err(ResourceError::NodeList {
                input: file.clone(),
                msg: "PBS node file is empty".into(),
            });
        }
        return Ok(Some(names));
    }
    if let Some(part) = env.get("COBALT_PARTNAME") {
        let nids = expand_range_list(part).map_err(|msg| ResourceError::NodeList {
            input: part.clone(),
            msg,
        })?;
        let names = nids
            .into_iter()
            .map(|n| format!("nid{:05}", n.parse::<u64>().unwrap_or(0)))
            .collect();
        return Ok(Some(names));
    }
    if let Some(hosts) = env.get("LSB_HOSTS") {
        let mut names = dedup_in_order(hosts.split_whitespace().map(str::to_string));
        // first entry is the launch node
        if names.len() > 1 {
            names.remove(0);
        }
        if names.is_empty() {
            return Err(ResourceError::NodeList {
                input: hosts.clone(),
                msg: "LSB_HOSTS is empty".into(),
            });
        }
        return Ok(Some(names));
    }
    Ok(None)
}

/// Builds the node inventory: scheduler node list from the environment if
/// present, else `fallback`, else a single `localhost` node.
pub fn detect_nodes(
    env: &HashMap<String, String>,
    fallback: Option<NodeInventory>,
) -> Result<NodeInventory, ResourceError> {
    if let Some(names) = scheduler_nodes(env)? {
        let cores = env
            .get("SLURM_CPUS_ON_NODE")
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(local_cores);
        return NodeInventory::new(
            names
                .into_iter()
                .map(|name| Node {
                    name,
                    cores,
                    gpus: 0,
                })
                .collect(),
        );
    }
    if let Some(inv) = fallback {
        return Ok(inv);
    }
    NodeInventory::new(vec![Node {
        name: "localhost".into(),
        cores: local_cores(),
        gpus: 0,
    }])
}

/// Parses an inventory document: one node per line as `name cores gpus`,
/// blank lines and `#` comments ignored.
pub fn parse_inventory(text: &str) -> Result<NodeInventory, ResourceError> {
    let mut nodes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ResourceError::Inventory { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected `name cores gpus`, found {} fields",
                fields.len()
            )));
        }
        let cores: u32 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad core count {:?}", fields[1])))?;
        let gpus: u32 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad gpu count {:?}", fields[2])))?;
        if cores == 0 {
            return Err(err("core count must be positive".into()));
        }
        nodes.push(Node {
            name: fields[0].to_string(),
            cores,
            gpus,
        });
    }
    NodeInventory::new(nodes)
}

pub fn read_inventory_file(path: &Path) -> Result<NodeInventory, ResourceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ResourceError::Io(format!("{}: {e}", path.display())))?;
    parse_inventory(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand expansion of a `prefix[lo-hi]` range with fixed width.
    fn manual_range(prefix: &str, lo: u32, hi: u32, width: usize) -> Vec<String> {
        let mut v = Vec::new();
        let mut i = lo;
        while i <= hi {
            let mut digits = i.to_string();
            while digits.len() < width {
                digits.insert(0, '0');
            }
            v.push(format!("{prefix}{digits}"));
            i += 1;
        }
        v
    }

    #[test]
    fn expands_padded_range() {
        let got = parse_nodelist("nid[000001-000003]").unwrap();
        assert_eq!(got, manual_range("nid", 1, 3, 6));
        assert_eq!(got, vec!["nid000001", "nid000002", "nid000003"]);
    }

    #[test]
    fn mixed_lists() {
        assert_eq!(
            parse_nodelist("a[1-2,5],b7,c[08-09]").unwrap(),
            vec!["a1", "a2", "a5", "b7", "c08", "c09"]
        );
        assert_eq!(
            parse_nodelist("r[1-2]n[1,3]").unwrap(),
            vec!["r1n1", "r1n3", "r2n1", "r2n3"]
        );
        assert_eq!(parse_nodelist("single").unwrap(), vec!["single"]);
    }

    #[test]
    fn malformed_lists() {
        for bad in ["", "nid[1-", "nid]1[", "nid[3-1]", "nid[a-b]", "x,,y", "n[[1]]"] {
            assert!(
                matches!(parse_nodelist(bad), Err(ResourceError::NodeList { .. })),
                "{bad:?} should fail"
            );
        }
    }

    #[test]
    fn detect_from_slurm() {
        let mut env = HashMap::new();
        env.insert("SLURM_JOB_NODELIST".to_string(), "nid[000001-000003]".to_string());
        env.insert("SLURM_CPUS_ON_NODE".to_string(), "64".to_string());
        let inv = detect_nodes(&env, None).unwrap();
        assert_eq!(inv.nodes.len(), 3);
        assert_eq!(inv.nodes[2].name, "nid000003");
        assert_eq!(inv.nodes[0].cores, 64);
    }

    #[test]
    fn detect_from_pbs_and_lsf_and_cobalt() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("nodes");
        std::fs::write(&f, "n1\nn1\nn2\n\nn3\n").unwrap();
        let mut env = HashMap::new();
        env.insert("PBS_NODEFILE".to_string(), f.display().to_string());
        let names: Vec<_> = detect_nodes(&env, None)
            .unwrap()
            .nodes
            .into_iter()
            .map(|n| n.name)
            .collect();
        assert_eq!(names, vec!["n1", "n2", "n3"]);

        let mut env = HashMap::new();
        env.insert("LSB_HOSTS".to_string(), "batch1 h1 h1 h2".to_string());
        let names: Vec<_> = detect_nodes(&env, None)
            .unwrap()
            .nodes
            .into_iter()
            .map(|n| n.name)
            .collect();
        assert_eq!(names, vec!["h1", "h2"]);

        let mut env = HashMap::new();
        env.insert("COBALT_PARTNAME".to_string(), "12-13,20".to_string());
        let names: Vec<_> = detect_nodes(&env, None)
            .unwrap()
            .nodes
            .into_iter()
            .map(|n| n.name)
            .collect();
        assert_eq!(names, vec!["nid00012", "nid00013", "nid00020"]);
    }

    #[test]
    fn fallback_and_local() {
        let env = HashMap::new();
        let inv = detect_nodes(&env, None).unwrap();
        assert_eq!(inv.nodes.len(), 1);
        assert_eq!(inv.nodes[0].name, "localhost");

        let fb = NodeInventory::uniform(&["a", "b"], 8, 2).unwrap();
        assert_eq!(detect_nodes(&env, Some(fb.clone())).unwrap(), fb);
    }

    #[test]
    fn inventory_file_format() {
        let inv = parse_inventory("# name cores gpus\nn0 64 8\n\nn1 64 8 # trailing\n").unwrap();
        assert_eq!(inv.nodes.len(), 2);
        assert_eq!(inv.total_gpus(), 16);
        match parse_inventory("n0 64\n") {
            Err(ResourceError::Inventory { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_inventory("").is_err());
        assert!(parse_inventory("n0 0 0").is_err());
    }
}
