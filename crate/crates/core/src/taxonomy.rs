//! Category taxonomy with similarity groups, used for semantic distractor
//! selection and the open-vocabulary holdout split.

use serde::{Deserialize, Serialize};

use crate::CoreError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub group_id: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Group {
    pub id: u32,
    pub name: String,
    pub members: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Taxonomy {
    pub categories: Vec<Category>,
    pub groups: Vec<Group>,
    /// Categories never referenced by train-split prompts.
    pub novel_holdout: Vec<u32>,
}

impl Taxonomy {
    /// Built-in 16-category, 6-group taxonomy.
    pub fn default_taxonomy() -> Self {
        let spec: [(&str, &[&str]); 6] = [
            ("seating", &["chair", "armchair", "sofa", "sofa bed"]),
            ("tables", &["table", "desk", "nightstand"]),
            ("storage", &["bookshelf", "cabinet", "wardrobe"]),
            ("appliances", &["fridge", "oven"]),
            ("decor", &["plant", "lamp"]),
            ("fixtures", &["sink", "bathtub"]),
        ];
        let mut categories = Vec::new();
        let mut groups = Vec::new();
        let mut next_cat = 0u32;
        for (gid, (gname, members)) in spec.iter().enumerate() {
            let gid = gid as u32;
            let mut ids = Vec::new();
            for name in members.iter() {
                categories.push(Category {
                    id: next_cat,
                    name: name.to_string(),
                    group_id: gid,
                });
                ids.push(next_cat);
                next_cat += 1;
            }
            groups.push(Group { id: gid, name: gname.to_string(), members: ids });
        }
        let holdout = vec![categories.iter().find(|c| c.name == "wardrobe").unwrap().id];
        Taxonomy { categories, groups, novel_holdout: holdout }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut names = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return Err(CoreError::Config(format!("duplicate category name {}", c.name)));
            }
            let group = self
                .groups
                .iter()
                .find(|g| g.id == c.group_id)
                .ok_or_else(|| CoreError::Config(format!("category {} has unknown group", c.name)))?;
            if !group.members.contains(&c.id) {
                return Err(CoreError::Config(format!(
                    "category {} missing from its group's member list",
                    c.name
                )));
            }
        }
        for g in &self.groups {
            for &m in &g.members {
                let c = self
                    .category(m)
                    .ok_or_else(|| CoreError::Config(format!("group {} lists unknown category", g.name)))?;
                if c.group_id != g.id {
                    return Err(CoreError::Config(format!(
                        "category {} listed in group {} but assigned elsewhere",
                        c.name, g.name
                    )));
                }
            }
        }
        for &h in &self.novel_holdout {
            if self.category(h).is_none() {
                return Err(CoreError::Config("holdout lists unknown category".into()));
            }
        }
        if self.categories.len() < 12 || self.groups.len() < 5 {
            return Err(CoreError::Config(
                "taxonomy needs at least 12 categories across 5 groups".into(),
            ));
        }
        Ok(())
    }

    pub fn category(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn same_group(&self, a: u32, b: u32) -> bool {
        match (self.category(a), self.category(b)) {
            (Some(ca), Some(cb)) => ca.group_id == cb.group_id,
            _ => false,
        }
    }

    pub fn is_holdout(&self, id: u32) -> bool {
        self.novel_holdout.contains(&id)
    }
}
