//! A single federated round driven by hand: broadcast, local updates,
//! sample-weighted aggregation. Also lists every type that can cross the
//! client/server boundary.

use fedpart::federation::{
    aggregate_updates, respond, Broadcast, ClientState, ClientUpdate, FederationConfig, TypeInventory,
    update_payload_bytes,
};
use fedpart::nets::{build_model, NetConfig};
use fedpart::synthdata::{generate_cohort, preprocess_site, CohortSpec, Preprocessing};

fn main() -> fedpart::Result<()> {
    let spec = CohortSpec {
        sites: 3,
        heterogeneity: 1.0,
        ..CohortSpec::default()
    };
    let mut sites = generate_cohort(&spec, 11)?;
    for s in &mut sites {
        preprocess_site(s, &Preprocessing::default())?;
    }
    let net = NetConfig::default();
    let clients: Vec<ClientState> = sites
        .iter()
        .enumerate()
        .map(|(k, s)| ClientState::from_site(k, &net, s))
        .collect::<fedpart::Result<_>>()?;

    let init = build_model(&net)?;
    let msg = Broadcast {
        round: 0,
        weights: init.params.clone(),
    };
    let config = FederationConfig::default();
    let updates: Vec<ClientUpdate> = clients.iter().map(|c| respond(c, &msg, &config)).collect::<fedpart::Result<_>>()?;
    for u in &updates {
        println!(
            "client {}: N_k = {:>3}, local loss {:.4}, payload {} bytes",
            u.client_id,
            u.num_samples,
            u.train_loss,
            update_payload_bytes(u)
        );
    }
    let global = aggregate_updates(&updates)?;
    let moved = global
        .values()
        .iter()
        .zip(init.params.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("global step norm {moved:.4}");
    println!("types reachable from ClientUpdate: {:?}", ClientUpdate::reachable_types());
    Ok(())
}
