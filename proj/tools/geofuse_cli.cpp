#include <csignal>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "geofuse/harness.hpp"

namespace {

geofuse::TcpServer* g_server = nullptr;

void handle_signal(int) {
    if (g_server) g_server->shutdown();
}

std::vector<std::pair<double, double>> parse_thresholds(const std::vector<double>& flat) {
    if (flat.empty()) return geofuse::kDefaultThresholds;
    if (flat.size() % 2 != 0) {
        throw CLI::ValidationError("--thresholds needs meter,degree pairs");
    }
    std::vector<std::pair<double, double>> out;
    for (size_t i = 0; i < flat.size(); i += 2) out.emplace_back(flat[i], flat[i + 1]);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geofuse: map building, visual localization service and client fusion"};
    app.require_subcommand(1);

    std::string config_path, out_dir, map_dir, bind_addr = "127.0.0.1:7607";
    std::string est_path, ref_path, endpoint;
    uint64_t seed = 0;
    bool has_seed = false, wire = false;
    size_t cache = 256;
    int workers = 2;
    std::vector<double> thresholds_flat;

    auto* build = app.add_subcommand("build-map", "render the mapping pass and build the map");
    build->add_option("--config", config_path, "scenario config file")->required();
    build->add_option("--out", out_dir, "output map directory")->required();
    build->add_option("--seed", seed)->each([&](const std::string&) { has_seed = true; });

    auto* serve = app.add_subcommand("serve", "run the localization service");
    serve->add_option("--map", map_dir, "map directory")->required();
    serve->add_option("--bind", bind_addr, "host:port (default 127.0.0.1:7607)");
    serve->add_option("--cache", cache, "shard cache capacity");
    serve->add_option("--workers", workers, "per-request matching workers");

    auto* client = app.add_subcommand("run-client", "run VIO + fusion against a service");
    client->add_option("--config", config_path)->required();
    client->add_option("--out", out_dir, "output directory")->required();
    client->add_option("--endpoint", endpoint, "service host:port (omit for in-process)");
    client->add_option("--map", map_dir, "map directory (in-process mode)");
    client->add_option("--seed", seed)->each([&](const std::string&) { has_seed = true; });

    auto* evaluate = app.add_subcommand("evaluate", "ATE + accuracy buckets from TUM files");
    evaluate->add_option("--est", est_path, "estimated trajectory")->required();
    evaluate->add_option("--ref", ref_path, "ground-truth trajectory")->required();
    evaluate->add_option("--thresholds", thresholds_flat,
                         "flat meter,degree pairs, e.g. 0.25 2 0.5 5");
    evaluate->add_option("--out", out_dir, "report directory");

    auto* e2e = app.add_subcommand("end-to-end", "build map, serve, run client, evaluate");
    e2e->add_option("--config", config_path)->required();
    e2e->add_option("--out", out_dir, "work directory")->required();
    e2e->add_flag("--wire", wire, "use the TCP wire protocol instead of in-process");
    e2e->add_option("--seed", seed)->each([&](const std::string&) { has_seed = true; });

    CLI11_PARSE(app, argc, argv);

    try {
        if (*build) {
            auto scenario = geofuse::load_scenario_file(config_path);
            if (has_seed) geofuse::apply_seed_override(scenario, seed);
            const auto stats = geofuse::cmd_build_map(scenario, out_dir);
            std::cout << "map written to " << stats.map_dir << "\n"
                      << "  mapping images: " << stats.mapping_images << "\n"
                      << "  map images:     " << stats.map_images << "\n"
                      << "  landmarks:      " << stats.landmarks << " ("
                      << stats.covisible_landmarks << " covisible)\n";
        } else if (*serve) {
            geofuse::VlsService service(map_dir, cache);
            geofuse::TcpServer server(service, bind_addr);
            g_server = &server;
            std::signal(SIGINT, handle_signal);
            std::signal(SIGTERM, handle_signal);
            std::cout << "serving map " << map_dir << " on port " << server.port()
                      << " (cache " << cache << ", workers " << workers << ")\n";
            server.run();
        } else if (*client) {
            auto scenario = geofuse::load_scenario_file(config_path);
            if (has_seed) geofuse::apply_seed_override(scenario, seed);
            geofuse::ClientRunResult run;
            if (!endpoint.empty()) {
                const auto [host, port] = geofuse::parse_bind_addr(endpoint);
                run = geofuse::run_client_wire(scenario, host, port);
            } else {
                if (map_dir.empty()) {
                    throw CLI::ValidationError("--map is required without --endpoint");
                }
                geofuse::VlsService service(map_dir, scenario.cache_capacity);
                run = geofuse::run_client_in_process(scenario, service);
            }
            geofuse::write_run_outputs(run, out_dir);
            const auto report = geofuse::evaluate_run(run, geofuse::kDefaultThresholds);
            geofuse::write_report(report, out_dir);
            std::cout << geofuse::report_text(report);
        } else if (*evaluate) {
            const auto report =
                geofuse::cmd_evaluate(est_path, ref_path, parse_thresholds(thresholds_flat));
            std::cout << geofuse::report_text(report);
            if (!out_dir.empty()) geofuse::write_report(report, out_dir);
        } else if (*e2e) {
            auto scenario = geofuse::load_scenario_file(config_path);
            if (has_seed) geofuse::apply_seed_override(scenario, seed);
            const auto report = geofuse::cmd_end_to_end(scenario, out_dir, wire);
            std::cout << geofuse::report_text(report);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
