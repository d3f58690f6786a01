//! Build a grid city, print its shape and route between two corners.
//!
//! cargo run --example grid_city -- [rows] [cols] [edge_drop]

use blocktraj::road_graph::{build_penalty, NEG_BIG};
use blocktraj::synth_world::{generate_city, shortest_path, GridCitySpec};

fn main() -> blocktraj::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let rows = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let cols = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let edge_drop_prob = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let net = generate_city(&GridCitySpec { rows, cols, edge_drop_prob, ..Default::default() })?;
    let (x0, y0, x1, y1) = net.bounding_box();
    println!("{rows}x{cols} grid: {} segments, {} transitions", net.len(), net.edges().len());
    println!("mean out-degree {:.3}, strongly connected {}", net.mean_out_degree(), net.is_strongly_connected());
    println!("bounding box ({x0}, {y0}) to ({x1}, {y1}), cell size {}", net.cell_size());

    let penalty = build_penalty(&net, NEG_BIG)?;
    let allowed = (0..net.len()).filter(|&j| penalty.get(0, j) == 0.0).count();
    println!("segment 0 may be followed by {allowed} segments");

    let lengths: Vec<f64> = net.segments().iter().map(|s| s.length).collect();
    let (org, dest) = (0, net.len() - 1);
    if let Some(path) = shortest_path(&net, &lengths, org, dest) {
        let metres: f64 = path.iter().map(|&s| lengths[s]).sum();
        println!("shortest route {org} -> {dest}: {} segments, {metres} m", path.len());
        for w in path.windows(2) {
            println!("  {:>3} -> {:>3}  turn {:>6.1} deg", w[0], w[1], net.steering_angle(w[0], w[1])?);
        }
    }
    Ok(())
}
