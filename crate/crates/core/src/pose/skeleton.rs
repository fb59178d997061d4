use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint tree. The root is its own parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parents: Vec<usize>,
    pub root: usize,
}

const H36M_NAMES: [&str; 17] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

const H36M_PARENTS: [usize; 17] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

impl Default for Skeleton {
    /// The 17-joint Human3.6M convention, rooted at the pelvis.
    fn default() -> Self {
        Skeleton {
            joint_names: H36M_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: H36M_PARENTS.to_vec(),
            root: 0,
        }
    }
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parents: Vec<usize>, root: usize) -> Result<Self> {
        let s = Skeleton {
            joint_names,
            parents,
            root,
        };
        s.validate()?;
        Ok(s)
    }

    /// A chain `0 <- 1 <- 2 ...` with `joints` joints, used for small
    /// test configurations.
    pub fn chain(joints: usize) -> Self {
        Skeleton {
            joint_names: (0..joints).map(|i| format!("j{i}")).collect(),
            parents: (0..joints).map(|i| i.saturating_sub(1)).collect(),
            root: 0,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 {
            return Err(Error::Parameter("skeleton has no joints".into()));
        }
        if self.joint_names.len() != j {
            return Err(Error::dim("skeleton names vs parents", &[self.joint_names.len()], &[j]));
        }
        if self.root >= j || self.parents[self.root] != self.root {
            return Err(Error::Parameter(format!("root {} is not its own parent", self.root)));
        }
        for start in 0..j {
            let mut cur = start;
            for _ in 0..=j {
                if cur == self.root {
                    break;
                }
                let p = self.parents[cur];
                if p >= j || p == cur {
                    return Err(Error::Parameter(format!("joint {cur} has invalid parent {p}")));
                }
                cur = p;
            }
            if cur != self.root {
                return Err(Error::Parameter(format!("joint {start} does not reach the root")));
            }
        }
        Ok(())
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let j = self.joint_count();
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend((0..j).filter(|&c| c != self.root && self.parents[c] == p));
            i += 1;
        }
        order
    }

    /// Edges `(parent, child)` excluding the root self-loop.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.joint_count())
            .filter(move |&c| c != self.root)
            .map(move |c| (self.parents[c], c))
    }

    /// `1` where joints are identical or directly connected, else `0`.
    pub fn incidence(&self) -> Vec<f32> {
        let j = self.joint_count();
        let mut a = vec![0.0; j * j];
        for i in 0..j {
            a[i * j + i] = 1.0;
        }
        for (p, c) in self.bones() {
            a[p * j + c] = 1.0;
            a[c * j + p] = 1.0;
        }
        a
    }
}
