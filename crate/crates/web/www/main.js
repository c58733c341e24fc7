import init, { soft_label, group_centers, bd_rate_text, ToyScene } from "./pkg/bqe_web.js";

const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.className = "out err";
  el.textContent = String(e);
}

function ok(el, text) {
  el.className = "out";
  el.textContent = text;
}

function updateLabel() {
  const qp = Number($("qp").value);
  const sigma = Number($("sigma").value);
  $("qp-v").textContent = qp;
  $("sigma-v").textContent = sigma;
  try {
    const g = soft_label(qp, sigma);
    const names = ["L", "M", "H"];
    $("bars").innerHTML = "";
    g.forEach((v, i) => {
      const bar = document.createElement("div");
      bar.className = "bar";
      bar.style.height = `${Math.max(v * 120, 14)}px`;
      bar.textContent = `${names[i]} ${v.toFixed(3)}`;
      $("bars").appendChild(bar);
    });
    const c = group_centers();
    ok($("label-out"), `g = (${g.map((v) => v.toExponential(4)).join(", ")}), centres ${c.join(", ")}`);
  } catch (e) {
    fail($("label-out"), e);
  }
}

let scene = null;

function rebuildScene() {
  try {
    if (scene) scene.free();
    scene = new ToyScene(Number($("points").value), BigInt($("seed").value));
    drawScene();
  } catch (e) {
    scene = null;
    fail($("toy-out"), e);
  }
}

function drawScene() {
  if (!scene) return;
  const qp = Number($("toy-qp").value);
  const k = Number($("k").value);
  $("toy-qp-v").textContent = qp;
  $("k-v").textContent = k;
  try {
    const view = $("view").value;
    const rgb = view === "clean" ? scene.colors(0) : view === "degraded" ? scene.colors(qp) : scene.recolored(k);
    const pos = scene.positions();
    const yaw = (Number($("yaw").value) * Math.PI) / 180;
    const [s, c] = [Math.sin(yaw), Math.cos(yaw)];
    const n = scene.len();
    let extent = 1;
    for (let i = 0; i < pos.length; i++) extent = Math.max(extent, Math.abs(pos[i]));
    const pts = [];
    for (let i = 0; i < n; i++) {
      const [x, y, z] = [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]];
      pts.push({ u: c * x - s * y, depth: s * x + c * y, v: z, i });
    }
    pts.sort((a, b) => a.depth - b.depth);
    const canvas = $("cloud");
    const ctx = canvas.getContext("2d");
    ctx.fillStyle = "#111";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    const scale = (canvas.width * 0.45) / extent;
    const r = Math.max(1.5, 180 / Math.sqrt(n));
    for (const p of pts) {
      ctx.fillStyle = `rgb(${rgb[3 * p.i]},${rgb[3 * p.i + 1]},${rgb[3 * p.i + 2]})`;
      ctx.fillRect(canvas.width / 2 + p.u * scale - r / 2, canvas.height / 2 - p.v * scale - r / 2, r, r);
    }
    const dp = scene.degraded_psnr(qp);
    const rp = scene.recolor_psnr(k);
    ok($("toy-out"), `${n} points | Y PSNR at QP ${qp}: ${dp.toFixed(2)} dB | recoloured previous frame (k=${k}): ${rp.toFixed(2)} dB`);
  } catch (e) {
    fail($("toy-out"), e);
  }
}

function updateBd() {
  try {
    const v = bd_rate_text($("anchor").value, $("test").value);
    ok($("bd-out"), `BD-rate ${v >= 0 ? "+" : ""}${v.toFixed(3)}% (negative means the test saves bits)`);
  } catch (e) {
    fail($("bd-out"), e);
  }
}

await init();
$("qp").addEventListener("input", updateLabel);
$("sigma").addEventListener("input", updateLabel);
$("points").addEventListener("change", rebuildScene);
$("seed").addEventListener("change", rebuildScene);
for (const id of ["view", "toy-qp", "k", "yaw"]) $(id).addEventListener("input", drawScene);
$("anchor").addEventListener("input", updateBd);
$("test").addEventListener("input", updateBd);
updateLabel();
rebuildScene();
updateBd();
