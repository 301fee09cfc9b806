#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qecl/runner.hpp"
#include "support.hpp"

using namespace qecl;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace fs = std::filesystem;

namespace {

// fresh scratch directory per test, under the system temp root
fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "qecl_io_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    const auto comma = line.find(',', pos);
    std::string cell =
        comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos);
    cells.push_back(std::move(cell));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return cells;
}

// rows of a CRLF csv file, line terminators stripped
std::vector<std::string> csv_lines(const fs::path& p) {
  const std::string text = slurp(p);
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto brk = text.find("\r\n", pos);
    REQUIRE(brk != std::string::npos);  // every row must end with CRLF
    lines.push_back(text.substr(pos, brk - pos));
    pos = brk + 2;
  }
  return lines;
}

bool bits_equal(double a, double b) {
  std::uint64_t ua, ub;
  std::memcpy(&ua, &a, sizeof ua);
  std::memcpy(&ub, &b, sizeof ub);
  return ua == ub;
}

Json base_config() {
  Json j;
  j["seed"] = 11;
  j["system"]["name"] = "harmonic_oscillator";
  Json obs;
  obs["type"] = "q";
  obs["site"] = 1;
  j["observables"] = Json::array({obs});
  j["ensemble"]["beta"] = 1.0;
  j["ensemble"]["count"] = 2000;
  j["ensemble"]["analytic_gaussian"] = true;
  return j;
}

Json chain_config() {
  Json j = base_config();
  j["seed"] = 17;
  j["system"] = Json::object();
  j["system"]["name"] = "harmonic_chain";
  j["system"]["n"] = 4;
  j["system"]["coupling"] = 1.0;
  j["system"]["pinning"] = 0.2;
  Json o1, o2;
  o1["type"] = "q";
  o1["site"] = 1;
  o2["type"] = "q";
  o2["site"] = 4;
  j["observables"] = Json::array({o1, o2});
  return j;
}

void add_near_closure(Json& j, const std::string& matrices = "analytic") {
  j["closure"]["regime"] = "near_G";
  j["closure"]["epsilon"] = 0.3;
  j["closure"]["dt"] = 0.01;
  j["closure"]["t1"] = 1.0;
  j["closure"]["record_stride"] = 10;
  j["closure"]["lambda0"] = Json::array({0.5, -0.3});
  j["closure"]["fully_specified"] = true;
  j["closure"]["matrices"] = matrices;
}

// every artifact listed in the manifest must hash and size back to the files
void check_manifest(const fs::path& dir, const std::string& command,
                    std::uint64_t seed, const std::string& canonical) {
  const Json manifest = read_json_file((dir / "manifest.json").string());
  REQUIRE(manifest.at("version").get<std::string>() == std::string(version));
  REQUIRE(manifest.at("meta").at("command").get<std::string>() == command);
  REQUIRE(manifest.at("meta").at("seed").get<std::uint64_t>() == seed);
  REQUIRE(manifest.at("meta").at("config_sha256").get<std::string>() ==
          sha256_string(canonical));
  const Json& arts = manifest.at("artifacts");
  REQUIRE(arts.is_object());
  REQUIRE(!arts.empty());
  for (auto it = arts.begin(); it != arts.end(); ++it) {
    const fs::path p = dir / it.key();
    REQUIRE(fs::exists(p));
    REQUIRE(it.value().at("sha256").get<std::string>() == sha256_file(p.string()));
    REQUIRE(it.value().at("bytes").get<std::int64_t>() ==
            static_cast<std::int64_t>(fs::file_size(p)));
  }
}

}  // namespace

TEST_CASE("format_double round trips every value exactly", "[io]") {
  const double values[] = {3.141592653589793,
                           0.1,
                           1.0 / 3.0,
                           1e-300,
                           5e-324,
                           1.7976931348623157e308,
                           -0.0,
                           1.0,
                           -2.5e-7,
                           6.02214076e23,
                           123456789.123456789};
  for (double x : values) {
    const std::string s = format_double(x);
    REQUIRE(s.find(',') == std::string::npos);
    char* end = nullptr;
    const double back = std::strtod(s.c_str(), &end);
    REQUIRE(end == s.c_str() + s.size());
    REQUIRE(bits_equal(back, x));
  }
  REQUIRE(format_double(-0.0).front() == '-');
  REQUIRE(format_double(0.5).find('.') != std::string::npos);
}

TEST_CASE("csv rows end with crlf and widths are enforced", "[io]") {
  const auto dir = scratch("csv");
  const auto path = dir / "t.csv";
  {
    CsvWriter csv(path.string(), {"a", "b"});
    csv.row({"1", "2.5"});
    REQUIRE_THROWS_AS(csv.row({"1", "2", "3"}), Error);
    csv.row({"-3", "4"});
  }
  REQUIRE(slurp(path) == "a,b\r\n1,2.5\r\n-3,4\r\n");
}

TEST_CASE("sha256 matches reference digests", "[io]") {
  REQUIRE(sha256_string("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  REQUIRE(sha256_string("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const auto dir = scratch("sha");
  const auto path = dir / "blob.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "hello\n";
  }
  REQUIRE(sha256_file(path.string()) == sha256_string("hello\n"));
  REQUIRE_THROWS_AS(sha256_file((dir / "missing").string()), Error);
}

TEST_CASE("json matrix and vector conversions are bitwise faithful", "[io]") {
  std::mt19937_64 eng(7101);
  Matrix mat = testgen::random_gaussian(3, 4, eng);
  mat(0, 0) = 1e-300;
  mat(1, 2) = -0.0;
  mat(2, 3) = 1.0 / 3.0;
  // through the text representation, not just the in-memory json value
  const Json parsed = Json::parse(matrix_to_json(mat).dump());
  const Matrix back = matrix_from_json(parsed, "test");
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 4);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) REQUIRE(bits_equal(back(i, j), mat(i, j)));

  Vector v = testgen::random_vector(5, eng);
  v[0] = -0.0;
  const Vector vback = vector_from_json(Json::parse(vector_to_json(v).dump()), "test");
  REQUIRE(vback.size() == 5);
  for (Eigen::Index i = 0; i < 5; ++i) REQUIRE(bits_equal(vback[i], v[i]));

  REQUIRE_THROWS_WITH(matrix_from_json(Json::array(), "x"),
                      ContainsSubstring("expected a matrix"));
  REQUIRE_THROWS_WITH(matrix_from_json(Json::parse("[[1,2],[3]]"), "x"),
                      ContainsSubstring("ragged"));
  REQUIRE_THROWS_WITH(vector_from_json(Json::object(), "x"),
                      ContainsSubstring("expected an array"));
}

TEST_CASE("manifest records content hashes and sizes", "[io]") {
  const auto dir = scratch("manifest");
  {
    std::ofstream a(dir / "one.txt", std::ios::binary);
    a << "first artifact\n";
    std::ofstream b(dir / "two.bin", std::ios::binary);
    b << std::string(100, 'x');
  }
  Json meta;
  meta["command"] = "demo";
  write_manifest(dir, {"one.txt", "two.bin"}, meta);

  const Json manifest = read_json_file((dir / "manifest.json").string());
  REQUIRE(manifest.at("version").get<std::string>() == std::string(version));
  REQUIRE(manifest.at("meta").at("command").get<std::string>() == "demo");
  const Json& arts = manifest.at("artifacts");
  REQUIRE(arts.size() == 2);
  REQUIRE(arts.at("one.txt").at("sha256").get<std::string>() ==
          sha256_string("first artifact\n"));
  REQUIRE(arts.at("one.txt").at("bytes").get<std::int64_t>() == 15);
  REQUIRE(arts.at("two.bin").at("sha256").get<std::string>() ==
          sha256_string(std::string(100, 'x')));
  REQUIRE(arts.at("two.bin").at("bytes").get<std::int64_t>() == 100);
  REQUIRE(!arts.contains("manifest.json"));
}

TEST_CASE("trajectory csv marks the matrix block", "[io]") {
  ClosureTrajectory traj;
  traj.regime = "demo";
  ClosureState s0;
  s0.t = 0.0;
  s0.lambda_hat = Vector{{0.5, -0.25}};
  s0.a_hat = Vector{{0.5, -0.25}};
  Matrix m0(2, 2);
  m0 << 2.0, 0.5, 0.5, 1.0;
  s0.M_hat = m0;
  s0.G_hat = Matrix::Identity(2, 2);  // M takes precedence when both are present
  s0.entropy = -0.1;
  s0.entropy_rate = 0.01;
  ClosureState s1 = s0;
  s1.t = 0.5;
  s1.M_hat.reset();
  ClosureState s2 = s1;
  s2.t = 1.0;
  s2.G_hat.reset();
  traj.states = {s0, s1, s2};

  const auto dir = scratch("traj");
  const auto path = dir / "trajectory.csv";
  write_trajectory_csv(path.string(), traj);

  const auto lines = csv_lines(path);
  REQUIRE(lines.size() == 4);
  REQUIRE(lines[0] ==
          "t,lambda_hat_0,lambda_hat_1,a_hat_0,a_hat_1,entropy,entropy_rate,"
          "matrix_kind,mat_0_0,mat_0_1,mat_1_0,mat_1_1");
  const auto r0 = split_cells(lines[1]);
  REQUIRE(r0.size() == 12);
  REQUIRE(r0[7] == "M");
  REQUIRE(std::stod(r0[8]) == 2.0);
  REQUIRE(std::stod(r0[9]) == 0.5);
  const auto r1 = split_cells(lines[2]);
  REQUIRE(r1[7] == "G");
  REQUIRE(std::stod(r1[8]) == 1.0);
  REQUIRE(std::stod(r1[9]) == 0.0);
  const auto r2 = split_cells(lines[3]);
  REQUIRE(r2[7] == "none");
  for (int c = 8; c < 12; ++c) REQUIRE(r2[c] == "0");

  ClosureTrajectory empty;
  REQUIRE_THROWS_AS(write_trajectory_csv((dir / "e.csv").string(), empty), Error);
}

TEST_CASE("resolved csv round trips bitwise", "[io]") {
  std::mt19937_64 eng(7102);
  ResolvedRun run;
  run.times = Vector{{0.0, 0.1, 0.2, 0.35}};
  run.a_exact = testgen::random_gaussian(4, 2, eng);
  run.a_exact(0, 0) = 1.0 / 3.0;
  run.std_errors = testgen::random_gaussian(4, 2, eng).cwiseAbs();

  const auto dir = scratch("resolved");
  const auto path = dir / "resolved.csv";
  write_resolved_csv(path.string(), run);

  const auto lines = csv_lines(path);
  REQUIRE(lines.size() == 5);
  REQUIRE(lines[0] == "t,a_exact_0,a_exact_1,std_error_0,std_error_1");

  const ResolvedRun back = read_resolved_csv(path.string());
  REQUIRE(back.times.size() == 4);
  REQUIRE(back.a_exact.rows() == 4);
  REQUIRE(back.a_exact.cols() == 2);
  for (long j = 0; j < 4; ++j) {
    REQUIRE(bits_equal(back.times[j], run.times[j]));
    for (long i = 0; i < 2; ++i) {
      REQUIRE(bits_equal(back.a_exact(j, i), run.a_exact(j, i)));
      REQUIRE(bits_equal(back.std_errors(j, i), run.std_errors(j, i)));
    }
  }

  {
    std::ofstream bad(dir / "bad_header.csv", std::ios::binary);
    bad << "x,y\r\n1,2\r\n";
  }
  REQUIRE_THROWS_WITH(read_resolved_csv((dir / "bad_header.csv").string()),
                      ContainsSubstring("unexpected header"));
  {
    std::ofstream bad(dir / "ragged.csv", std::ios::binary);
    bad << "t,a_exact_0,std_error_0\r\n0,1,0.1\r\n0.1,2\r\n";
  }
  REQUIRE_THROWS_WITH(read_resolved_csv((dir / "ragged.csv").string()),
                      ContainsSubstring("ragged"));
  REQUIRE_THROWS_AS(read_resolved_csv((dir / "missing.csv").string()), Error);
}

TEST_CASE("hj surface subsampling keeps the final row", "[io]") {
  HJSolution sol;
  sol.lambdas = Vector{{-1.0, 0.0, 1.0}};
  sol.times.resize(8);
  sol.minimizer.resize(8);
  sol.curvature.resize(8);
  sol.surface.resize(8, 3);
  for (long r = 0; r < 8; ++r) {
    sol.times[r] = 0.1 * static_cast<double>(r);
    sol.minimizer[r] = 0.01 * static_cast<double>(r);
    sol.curvature[r] = 1.0 + 0.1 * static_cast<double>(r);
    for (long j = 0; j < 3; ++j) sol.surface(r, j) = static_cast<double>(r) + 0.1 * j;
  }

  const auto dir = scratch("hjsurf");
  const auto spath = dir / "surface.csv";
  write_hj_surface_csv(spath.string(), sol, 3);
  const auto lines = csv_lines(spath);
  REQUIRE(lines.size() == 5);  // header + rows 0, 3, 6 + forced final row 7
  REQUIRE(lines[0] == "t,v_0,v_1,v_2");
  REQUIRE(std::stod(split_cells(lines[1])[0]) == 0.0);
  REQUIRE(std::stod(split_cells(lines[2])[0]) == Approx(0.3));
  REQUIRE(std::stod(split_cells(lines[3])[0]) == Approx(0.6));
  const auto last = split_cells(lines[4]);
  REQUIRE(std::stod(last[0]) == Approx(0.7));
  REQUIRE(std::stod(last[1]) == 7.0);

  const auto hpath = dir / "hj.csv";
  write_hj_csv(hpath.string(), sol);
  const auto hlines = csv_lines(hpath);
  REQUIRE(hlines.size() == 9);
  REQUIRE(hlines[0] == "t,minimizer,curvature");
  REQUIRE(std::stod(split_cells(hlines[8])[2]) == Approx(1.7));
}

TEST_CASE("config parsing fills every section", "[io]") {
  Json j;
  j["seed"] = 42;
  j["system"]["name"] = "fpu_chain";
  j["system"]["n"] = 3;
  j["system"]["quartic"] = 0.4;
  Json o1, o2;
  o1["type"] = "q_squared";
  o1["site"] = 1;
  o1["center"] = 0.5;
  o2["type"] = "q_squared";
  o2["site"] = 2;
  o2["center"] = "equilibrium";
  j["observables"] = Json::array({o1, o2});
  j["ensemble"]["beta"] = 2.0;
  j["ensemble"]["count"] = 500;
  j["ensemble"]["sampler"]["burn_in"] = 100;
  j["ensemble"]["sampler"]["thinning"] = 2;
  j["ensemble"]["sampler"]["proposal_scale"] = 0.3;
  j["ensemble"]["sampler"]["n_chains"] = 2;
  j["ensemble"]["center_presample"] = 500;
  j["closure"]["regime"] = "near_G";
  j["closure"]["epsilon"] = 0.25;
  j["closure"]["scheme"] = "adaptive";
  j["closure"]["dt"] = 0.01;
  j["closure"]["t1"] = 2.0;
  j["closure"]["record_stride"] = 5;
  j["closure"]["lambda0"] = Json::array({0.1, -0.2});
  j["closure"]["matrices"] = "estimate";
  j["closure"]["provider"]["cache_radius"] = 0.01;
  j["closure"]["provider"]["ess_floor"] = 0.1;
  j["closure"]["provider"]["allow_resample"] = false;
  j["closure"]["provider"]["count"] = 400;
  j["resolve"]["n_traj"] = 32;
  j["resolve"]["dt"] = 0.01;
  j["resolve"]["t1"] = 1.0;
  j["resolve"]["dt_out"] = 0.1;
  j["resolve"]["drift_tol"] = 1e-3;
  j["tune"]["bracket"] = Json::array({0.05, 0.8});
  j["tune"]["tol"] = 1e-3;
  j["tune"]["window"] = Json::array({0.5, 1.0});
  j["hj"]["lambda_min"] = -1.0;
  j["hj"]["lambda_max"] = 1.0;
  j["hj"]["n_points"] = 201;
  j["hj"]["dt"] = 1e-3;
  j["hj"]["dissipation"] = 1e-3;
  j["hj"]["penalty_b"] = 500.0;
  j["hj"]["t1"] = 0.5;
  j["hj"]["lambda0"] = 0.2;
  j["hj"]["epsilon"] = 0.4;

  const RunConfig rc = parse_config(j);
  REQUIRE(rc.seed == 42);
  REQUIRE(rc.system.name == "fpu_chain");
  REQUIRE(rc.system.n == 3);
  REQUIRE(rc.system.quartic == 0.4);
  REQUIRE(rc.observables.size() == 2);
  REQUIRE(rc.observables[0].center == 0.5);
  REQUIRE(!rc.observables[0].center_from_equilibrium);
  REQUIRE(rc.observables[1].center_from_equilibrium);
  REQUIRE(rc.ensemble.beta == 2.0);
  REQUIRE(rc.ensemble.count == 500);
  REQUIRE(!rc.ensemble.analytic_gaussian);
  REQUIRE(rc.ensemble.sampler.burn_in == 100);
  REQUIRE(rc.ensemble.sampler.thinning == 2);
  REQUIRE(rc.ensemble.sampler.proposal_scale == 0.3);
  REQUIRE(rc.ensemble.sampler.n_chains == 2);
  REQUIRE(rc.ensemble.center_presample == 500);
  REQUIRE(rc.closure);
  REQUIRE(rc.closure->cfg.regime == "near_G");
  REQUIRE(rc.closure->cfg.epsilon == 0.25);
  REQUIRE(rc.closure->cfg.scheme == "adaptive");
  REQUIRE(rc.closure->cfg.record_stride == 5);
  REQUIRE(rc.closure->lambda0.size() == 2);
  REQUIRE(rc.closure->lambda0[1] == -0.2);
  REQUIRE(!rc.closure->M0);
  REQUIRE(!rc.closure->fully_specified);
  REQUIRE(rc.closure->matrices.kind == "estimate");
  REQUIRE(rc.closure->provider.cache_radius == 0.01);
  REQUIRE(rc.closure->provider.fd_step == 1e-3);  // default survives partial override
  REQUIRE(rc.closure->provider.ess_floor == 0.1);
  REQUIRE(!rc.closure->provider.allow_resample);
  REQUIRE(rc.closure->provider.resample_count == 400);
  REQUIRE(rc.resolve);
  REQUIRE(rc.resolve->n_traj == 32);
  REQUIRE(rc.resolve->drift_tol == 1e-3);
  REQUIRE(rc.tune);
  REQUIRE(rc.tune->lo == 0.05);
  REQUIRE(rc.tune->hi == 0.8);
  REQUIRE(rc.tune->window_lo == 0.5);
  REQUIRE(rc.tune->window_hi == 1.0);
  REQUIRE(rc.hj);
  REQUIRE(rc.hj->n_points == 201);
  REQUIRE(rc.hj->penalty_b == 500.0);
  REQUIRE(rc.hj->cfl_safety == 0.45);
  REQUIRE(rc.canonical == j.dump());

  // adiabatic closures may omit epsilon
  Json ja = base_config();
  ja["closure"]["regime"] = "adiabatic";
  ja["closure"]["t1"] = 1.0;
  ja["closure"]["lambda0"] = Json::array({0.1});
  const RunConfig rca = parse_config(ja);
  REQUIRE(rca.closure->cfg.epsilon == 0.0);
}

TEST_CASE("config parsing rejects bad documents", "[io]") {
  auto reject = [](const Json& j, const char* fragment) {
    REQUIRE_THROWS_AS(parse_config(j), ValidationError);
    REQUIRE_THROWS_WITH(parse_config(j), ContainsSubstring(fragment));
  };

  {
    Json j = base_config();
    j["extra"] = 1;
    reject(j, "unknown key 'extra'");
  }
  {
    Json j = base_config();
    j.erase("seed");
    reject(j, "missing required key 'seed'");
  }
  {
    Json j = base_config();
    j["system"]["name"] = "pendulum";
    reject(j, "unknown name");
  }
  {
    Json j = base_config();
    j["system"]["n"] = 2;
    reject(j, "has n=1");
  }
  {
    Json j = chain_config();
    j["system"]["name"] = "fpu_chain";
    reject(j, "missing required key 'quartic'");
  }
  {
    Json j = chain_config();
    j["system"]["quartic"] = 0.1;
    reject(j, "applies to fpu_chain only");
  }
  {
    Json j = base_config();
    j["observables"] = Json::array();
    reject(j, "nonempty array");
  }
  {
    Json j = chain_config();
    j["observables"][1]["site"] = 5;
    reject(j, "out of range");
  }
  {
    Json j = base_config();
    j["observables"][0]["center"] = 0.0;
    reject(j, "applies to q_squared only");
  }
  {
    Json j = base_config();
    j["observables"][0]["type"] = "q_squared";
    j["observables"][0]["center"] = "mean";
    reject(j, "must be a number or");
  }
  {
    Json j = base_config();
    j["ensemble"]["beta"] = -1.0;
    reject(j, "beta must be positive");
  }
  {
    Json j = base_config();
    j["ensemble"]["count"] = 5;
    reject(j, "at least 10");
  }
  {
    Json j = base_config();
    j["ensemble"]["sampler"]["proposal_scale"] = 0.0;
    reject(j, "invalid sampler parameters");
  }
  {
    Json j = base_config();
    j["closure"]["regime"] = "smooth";
    j["closure"]["t1"] = 1.0;
    j["closure"]["lambda0"] = Json::array({0.1});
    reject(j, "unknown regime");
  }
  {
    Json j = base_config();
    j["closure"]["regime"] = "near_G";
    j["closure"]["t1"] = 1.0;
    j["closure"]["lambda0"] = Json::array({0.1});
    reject(j, "missing required key 'epsilon'");
  }
  {
    Json j = base_config();
    add_near_closure(j);
    j["closure"]["lambda0"] = Json::array({0.1, 0.2});  // config has one observable
    reject(j, "lambda0 length");
  }
  {
    Json j = base_config();
    add_near_closure(j);
    j["closure"]["lambda0"] = Json::array({0.1});
    j["closure"]["matrices"] = "file";
    reject(j, "use \"estimate\"");
  }
  {
    Json j = base_config();
    add_near_closure(j);
    j["closure"]["lambda0"] = Json::array({0.1});
    j["closure"]["matrices"] = Json::object();
    j["closure"]["matrices"]["file"] = "/nonexistent/matrices.json";
    reject(j, "does not exist");
  }
  {
    Json j = base_config();
    add_near_closure(j);
    j["closure"]["lambda0"] = Json::array({0.1});
    j["closure"]["provider"]["ess_floor"] = 1.5;
    reject(j, "invalid provider parameters");
  }
  {
    Json j = base_config();
    j["resolve"]["n_traj"] = 16;
    j["resolve"]["dt"] = 0.1;
    j["resolve"]["t1"] = 1.0;
    j["resolve"]["dt_out"] = 0.25;
    reject(j, "integer multiple");
  }
  {
    Json j = base_config();
    j["tune"]["bracket"] = Json::array({0.5, 0.1});
    reject(j, "bracket must be");
  }
  {
    Json j = base_config();
    j["tune"]["bracket"] = Json::array({0.1, 0.5});
    j["tune"]["window"] = Json::array({2.0, 1.0});
    reject(j, "window must be");
  }
  {
    Json j = base_config();
    j["hj"]["lambda_min"] = -1.0;
    j["hj"]["lambda_max"] = 1.0;
    j["hj"]["n_points"] = 201;
    j["hj"]["dissipation"] = 1e-3;
    j["hj"]["penalty_b"] = 100.0;
    j["hj"]["t1"] = 0.5;
    j["hj"]["lambda0"] = 0.2;
    j["hj"]["epsilon"] = 0.4;
    reject(j, "missing required key 'dt'");
  }
  {
    // grid spacing 0.005 and dissipation 2e-3 bound dt by 5.625e-3
    Json j = base_config();
    j["hj"]["lambda_min"] = -1.0;
    j["hj"]["lambda_max"] = 1.0;
    j["hj"]["n_points"] = 401;
    j["hj"]["dt"] = 1e-2;
    j["hj"]["dissipation"] = 2e-3;
    j["hj"]["penalty_b"] = 100.0;
    j["hj"]["t1"] = 0.5;
    j["hj"]["lambda0"] = 0.2;
    j["hj"]["epsilon"] = 0.4;
    REQUIRE_THROWS_WITH(parse_config(j), ContainsSubstring("CFL"));
  }
}

TEST_CASE("matrices command writes verified artifacts", "[io][runner]") {
  Json j = chain_config();
  add_near_closure(j);
  const RunConfig rc = parse_config(j);
  const auto dir = scratch("run_matrices");
  const CommandResult res = cmd_matrices(rc, dir.string());

  REQUIRE(res.summary.at("kind").get<std::string>() == "near_equilibrium_matrices");
  REQUIRE(res.summary.at("source").get<std::string>() == "analytic");
  REQUIRE(res.summary.at("beta").get<double>() == 1.0);
  const auto ids = res.summary.at("observable_ids").get<std::vector<std::string>>();
  REQUIRE(ids == std::vector<std::string>{"q1", "q4"});

  // the summary on disk is the returned summary
  const Json disk = read_json_file((dir / "matrices.json").string());
  REQUIRE(disk == res.summary);

  // and the matrices are the closed-form Gaussian ones
  const HamiltonianSystem sys = make_system(rc.system);
  Matrix C, J, D;
  analytic_gaussian_matrices(sys, rc.observables, rc.ensemble.beta, C, J, D);
  const Matrix Cj = matrix_from_json(disk.at("C"), "C");
  REQUIRE(Cj.rows() == 2);
  REQUIRE(testgen::max_abs_diff(Cj, C) == 0.0);
  REQUIRE(testgen::max_abs_diff(matrix_from_json(disk.at("D"), "D"), D) == 0.0);

  const Json echo = read_json_file((dir / "config_echo.json").string());
  REQUIRE(echo == j);
  check_manifest(dir, "matrices", 17, rc.canonical);

  // computing matrices from a file source is meaningless
  Json jf = chain_config();
  add_near_closure(jf);
  write_json_file((dir / "m_in.json").string(), disk);
  jf["closure"]["matrices"] = Json::object();
  jf["closure"]["matrices"]["file"] = (dir / "m_in.json").string();
  REQUIRE_THROWS_WITH(cmd_matrices(parse_config(jf), (dir / "again").string()),
                      ContainsSubstring("applies to reduce and tune only"));
}

TEST_CASE("reduce command records the expected grid", "[io][runner]") {
  Json j = chain_config();
  add_near_closure(j);
  const RunConfig rc = parse_config(j);
  const auto dir = scratch("run_reduce");
  const CommandResult res = cmd_reduce(rc, dir.string());

  REQUIRE(res.summary.at("regime").get<std::string>() == "near_G");
  REQUIRE(res.summary.at("epsilon").get<double>() == 0.3);
  REQUIRE(res.summary.at("scheme").get<std::string>() == "rk4");
  REQUIRE(res.summary.at("dt_nominal").get<double>() == 0.01);
  REQUIRE(res.summary.at("record_stride").get<long>() == 10);
  REQUIRE(res.summary.at("n_records").get<long>() == 11);
  REQUIRE(res.summary.at("matrices_source").get<std::string>() == "analytic");
  REQUIRE(res.summary.at("fully_specified").get<bool>());
  REQUIRE(res.summary.at("lambda0").get<std::vector<double>>() ==
          std::vector<double>{0.5, -0.3});

  const auto lines = csv_lines(dir / "trajectory.csv");
  REQUIRE(lines.size() == 12);  // header + 11 records
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = split_cells(lines[r]);
    REQUIRE(cells.size() == 1 + 2 + 2 + 2 + 1 + 4);
    REQUIRE(std::stod(cells[0]) ==
            Approx(0.1 * static_cast<double>(r - 1)).margin(1e-12));
    REQUIRE(cells[7] == "G");
  }
  REQUIRE(read_json_file((dir / "reduce.json").string()) == res.summary);
  check_manifest(dir, "reduce", 17, rc.canonical);
  REQUIRE(fs::exists(dir / "matrices.json"));
}

TEST_CASE("reduce reruns are byte identical", "[io][runner]") {
  Json j = chain_config();
  add_near_closure(j);
  const RunConfig rc = parse_config(j);
  const auto d1 = scratch("rerun_a");
  const auto d2 = scratch("rerun_b");
  cmd_reduce(rc, d1.string());
  cmd_reduce(rc, d2.string());
  for (const char* name :
       {"trajectory.csv", "reduce.json", "matrices.json", "config_echo.json",
        "manifest.json"}) {
    REQUIRE(sha256_file((d1 / name).string()) == sha256_file((d2 / name).string()));
  }
}

TEST_CASE("matrices from file reproduce the analytic trajectory", "[io][runner]") {
  Json j = chain_config();
  add_near_closure(j);
  const auto dm = scratch("file_src_m");
  cmd_matrices(parse_config(j), dm.string());

  const auto da = scratch("file_src_a");
  cmd_reduce(parse_config(j), da.string());

  Json jf = chain_config();
  add_near_closure(jf);
  jf["closure"]["matrices"] = Json::object();
  jf["closure"]["matrices"]["file"] = (dm / "matrices.json").string();
  const auto db = scratch("file_src_b");
  const CommandResult res = cmd_reduce(parse_config(jf), db.string());

  // file sources record the originating path
  REQUIRE(res.summary.at("matrices_source").get<std::string>().rfind("file:", 0) == 0);
  REQUIRE(sha256_file((da / "trajectory.csv").string()) ==
          sha256_file((db / "trajectory.csv").string()));
}

TEST_CASE("resolve command writes a readable average", "[io][runner]") {
  Json j = base_config();
  j["seed"] = 23;
  j["closure"]["regime"] = "near_G";
  j["closure"]["epsilon"] = 0.1;
  j["closure"]["t1"] = 1.0;
  j["closure"]["lambda0"] = Json::array({0.4});
  j["closure"]["matrices"] = "analytic";
  j["resolve"]["n_traj"] = 64;
  j["resolve"]["dt"] = 0.01;
  j["resolve"]["t1"] = 0.2;
  j["resolve"]["dt_out"] = 0.1;
  const RunConfig rc = parse_config(j);
  const auto dir = scratch("run_resolve");
  const CommandResult res = cmd_resolve(rc, dir.string());

  REQUIRE(res.summary.at("n_traj").get<long>() == 64);
  REQUIRE(res.summary.at("observable_ids").get<std::vector<std::string>>() ==
          std::vector<std::string>{"q1"});
  REQUIRE(res.summary.at("energy_drift").get<double>() >= 0.0);
  REQUIRE(res.summary.at("energy_drift").get<double>() < 1e-4);
  REQUIRE(res.summary.at("seed").get<std::uint64_t>() == 23);

  const ResolvedRun run = read_resolved_csv((dir / "resolved.csv").string());
  REQUIRE(run.times.size() == 3);
  REQUIRE(run.times[0] == 0.0);
  REQUIRE(run.times[2] == Approx(0.2).margin(1e-12));
  REQUIRE(run.a_exact.cols() == 1);
  // t=0 column averages the tilted initial ensemble near a(lambda0)=0.4
  REQUIRE(run.a_exact(0, 0) == Approx(0.4).margin(5.0 * run.std_errors(0, 0)));
  REQUIRE(run.std_errors.minCoeff() > 0.0);
  check_manifest(dir, "resolve", 23, rc.canonical);
}

TEST_CASE("ensemble cache is reused and beta is checked", "[io][runner]") {
  const auto dir = scratch("run_cache");
  const std::string cache = (dir / "batch.cache").string();

  Json j = chain_config();
  add_near_closure(j, "estimate");
  j["ensemble"]["cache"] = cache;
  const CommandResult first = cmd_matrices(parse_config(j), (dir / "a").string());
  REQUIRE(fs::exists(cache));

  Json j2 = chain_config();
  add_near_closure(j2, "estimate");
  j2["ensemble"]["from_cache"] = cache;
  const CommandResult second = cmd_matrices(parse_config(j2), (dir / "b").string());
  REQUIRE(second.summary.at("C") == first.summary.at("C"));
  REQUIRE(second.summary.at("J") == first.summary.at("J"));
  REQUIRE(second.summary.at("D") == first.summary.at("D"));

  Json j3 = chain_config();
  add_near_closure(j3, "estimate");
  j3["ensemble"]["from_cache"] = cache;
  j3["ensemble"]["beta"] = 2.0;
  REQUIRE_THROWS_AS(cmd_matrices(parse_config(j3), (dir / "c").string()),
                    ValidationError);
}

TEST_CASE("seed changes the estimate", "[io][runner]") {
  Json j = chain_config();
  add_near_closure(j, "estimate");
  j["seed"] = 5;
  const auto d1 = scratch("seed_a");
  const CommandResult r1 = cmd_matrices(parse_config(j), d1.string());
  j["seed"] = 6;
  const auto d2 = scratch("seed_b");
  const CommandResult r2 = cmd_matrices(parse_config(j), d2.string());
  REQUIRE(r1.summary.at("C").at(0).at(0).get<double>() !=
          r2.summary.at("C").at(0).at(0).get<double>());
}

TEST_CASE("tune command artifacts are complete and deterministic", "[io][runner]") {
  Json j = chain_config();
  j["seed"] = 29;
  j["system"]["n"] = 3;
  j["observables"][1]["site"] = 3;
  j["closure"]["regime"] = "near_G";
  j["closure"]["epsilon"] = 0.2;  // starting value, the tuner overrides it
  j["closure"]["dt"] = 0.02;
  j["closure"]["t1"] = 2.0;
  j["closure"]["lambda0"] = Json::array({0.5, -0.3});
  j["closure"]["fully_specified"] = true;
  j["closure"]["matrices"] = "analytic";
  j["resolve"]["n_traj"] = 128;
  j["resolve"]["dt"] = 0.01;
  j["resolve"]["t1"] = 2.0;
  j["resolve"]["dt_out"] = 0.2;
  j["tune"]["bracket"] = Json::array({0.05, 0.6});
  j["tune"]["tol"] = 5e-3;
  j["tune"]["window"] = Json::array({0.4, 2.0});
  const RunConfig rc = parse_config(j);

  const auto d1 = scratch("run_tune_a");
  const CommandResult res = cmd_tune(rc, d1.string());
  const double eps_star = res.summary.at("epsilon_star").get<double>();
  REQUIRE(eps_star >= 0.05);
  REQUIRE(eps_star <= 0.6);
  REQUIRE(res.summary.at("objective").get<double>() >= 0.0);
  REQUIRE(res.summary.at("evaluations").get<long>() >= 5);
  REQUIRE(res.summary.at("n_rows").get<long>() == 11);
  REQUIRE(res.summary.at("regime").get<std::string>() == "near_G");
  REQUIRE(res.summary.at("bracket").get<std::vector<double>>() ==
          std::vector<double>{0.05, 0.6});

  // the evaluation history csv matches the reported count
  const auto hist = csv_lines(d1 / "tune.csv");
  REQUIRE(hist[0] == "epsilon,objective");
  REQUIRE(static_cast<long>(hist.size()) - 1 ==
          res.summary.at("evaluations").get<long>());
  // best trajectory shares the resolved record grid
  REQUIRE(csv_lines(d1 / "best_trajectory.csv").size() == 12);
  check_manifest(d1, "tune", 29, rc.canonical);

  const auto d2 = scratch("run_tune_b");
  cmd_tune(rc, d2.string());
  for (const char* name : {"tune.json", "tune.csv", "best_trajectory.csv",
                           "resolved.csv", "manifest.json"}) {
    REQUIRE(sha256_file((d1 / name).string()) == sha256_file((d2 / name).string()));
  }
}

TEST_CASE("verify command writes the hj artifact set", "[io][runner]") {
  Json j = base_config();
  j["seed"] = 31;
  j["hj"]["lambda_min"] = -0.8;
  j["hj"]["lambda_max"] = 0.8;
  j["hj"]["n_points"] = 101;
  j["hj"]["dt"] = 5e-3;
  j["hj"]["dissipation"] = 2e-3;
  j["hj"]["penalty_b"] = 100.0;
  j["hj"]["t1"] = 0.2;
  j["hj"]["lambda0"] = 0.2;
  j["hj"]["epsilon"] = 0.3;
  const RunConfig rc = parse_config(j);
  const auto dir = scratch("run_verify");
  const CommandResult res = cmd_verify(rc, dir.string());

  REQUIRE(res.summary.at("epsilon").get<double>() == 0.3);
  REQUIRE(res.summary.at("grid").at("n_points").get<long>() == 101);
  REQUIRE(res.summary.at("total_steps").get<long>() >= 40);
  REQUIRE(res.summary.at("max_abs_minimizer_error").get<double>() >= 0.0);
  REQUIRE(res.summary.at("max_abs_minimizer_error").get<double>() < 0.05);
  REQUIRE(std::isfinite(res.summary.at("max_rel_curvature_error").get<double>()));

  const auto hj = csv_lines(dir / "hj.csv");
  REQUIRE(hj.size() == 42);  // header + 41 records covering [0, 0.2]
  REQUIRE(std::stod(split_cells(hj[1])[1]) == Approx(0.2).margin(1e-6));
  REQUIRE(csv_lines(dir / "hj_surface.csv").size() == 42);
  const auto ref = csv_lines(dir / "closure_reference.csv");
  REQUIRE(ref.size() == 42);
  REQUIRE(split_cells(ref[1])[5] == "M");  // far reference tracks the curvature form
  REQUIRE(read_json_file((dir / "verify.json").string()) == res.summary);
  check_manifest(dir, "verify", 31, rc.canonical);
}

TEST_CASE("commands validate their sections", "[io][runner]") {
  const auto dir = scratch("cmd_validation");
  {
    Json j = base_config();
    REQUIRE_THROWS_WITH(cmd_reduce(parse_config(j), (dir / "a").string()),
                        ContainsSubstring("requires a 'closure' section"));
  }
  {
    Json j = base_config();
    j["closure"]["regime"] = "near_G";
    j["closure"]["epsilon"] = 0.1;
    j["closure"]["t1"] = 1.0;
    j["closure"]["lambda0"] = Json::array({0.4});
    REQUIRE_THROWS_WITH(cmd_resolve(parse_config(j), (dir / "b").string()),
                        ContainsSubstring("requires a 'resolve' section"));
    REQUIRE_THROWS_WITH(cmd_tune(parse_config(j), (dir / "c").string()),
                        ContainsSubstring("requires a 'tune' section"));
    REQUIRE_THROWS_WITH(cmd_verify(parse_config(j), (dir / "d").string()),
                        ContainsSubstring("requires an 'hj' section"));
  }
  {
    Json j = base_config();
    j["closure"]["regime"] = "adiabatic";
    j["closure"]["t1"] = 1.0;
    j["closure"]["lambda0"] = Json::array({0.4});
    j["tune"]["bracket"] = Json::array({0.1, 0.5});
    j["resolve"]["n_traj"] = 16;
    j["resolve"]["dt"] = 0.01;
    j["resolve"]["t1"] = 0.1;
    j["resolve"]["dt_out"] = 0.05;
    REQUIRE_THROWS_WITH(cmd_tune(parse_config(j), (dir / "e").string()),
                        ContainsSubstring("does not depend on epsilon"));
  }
}
