import init, { bag_scene, domain_embedding, train_curve } from "./pkg/webxfer_demo.js";

const $ = (id) => document.getElementById(id);

function call(f, ...args) {
  try {
    $("status").textContent = "";
    return JSON.parse(f(...args));
  } catch (e) {
    $("status").textContent = String(e);
    return null;
  }
}

function drawScene() {
  const clutter = Number($("scene-clutter").value);
  $("scene-clutter-v").textContent = clutter;
  const scene = call(bag_scene, Number($("scene-seed").value), clutter);
  if (!scene) return;
  const ctx = $("scene").getContext("2d");
  const s = ctx.canvas.width / 100;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  const colors = { object: "#1a7f37", distractor: "#d97706", background: "#bbb" };
  const order = ["background", "distractor", "object"];
  for (const kind of order) {
    for (const p of scene.proposals.filter((p) => p.kind === kind)) {
      const [x1, y1, x2, y2] = p.box;
      ctx.strokeStyle = colors[kind];
      ctx.lineWidth = kind === "object" ? 2 : 1;
      ctx.strokeRect(x1 * s, y1 * s, (x2 - x1) * s, (y2 - y1) * s);
    }
  }
  ctx.setLineDash([6, 4]);
  ctx.strokeStyle = "#111";
  ctx.lineWidth = 2;
  ctx.font = "12px sans-serif";
  for (const g of scene.gt) {
    const [x1, y1, x2, y2] = g.box;
    ctx.strokeRect(x1 * s, y1 * s, (x2 - x1) * s, (y2 - y1) * s);
    ctx.fillText(`class ${g.class}`, x1 * s + 3, y1 * s + 14);
  }
  ctx.setLineDash([]);
}

function drawEmbedding() {
  const scale = Number($("emb-scale").value);
  const noise = Number($("emb-noise").value);
  $("emb-scale-v").textContent = scale;
  $("emb-noise-v").textContent = noise;
  const emb = call(domain_embedding, 7, scale, noise);
  if (!emb) return;
  const ctx = $("embedding").getContext("2d");
  const { width: w, height: h } = ctx.canvas;
  ctx.clearRect(0, 0, w, h);
  const xs = emb.points.map((p) => p.x);
  const ys = emb.points.map((p) => p.y);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const px = (x) => 10 + ((x - x0) / (x1 - x0 || 1)) * (w - 20);
  const py = (y) => h - 10 - ((y - y0) / (y1 - y0 || 1)) * (h - 20);
  for (const p of emb.points) {
    ctx.fillStyle = p.domain === "web" ? "#2563eb" : p.class === null ? "#f3b4b4" : "#dc2626";
    ctx.fillRect(px(p.x) - 1.5, py(p.y) - 1.5, 3, 3);
  }
}

function drawCurve(rows) {
  const ctx = $("curve").getContext("2d");
  const { width: w, height: h } = ctx.canvas;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ddd";
  for (let v = 0; v <= 1; v += 0.25) {
    const y = h - 20 - v * (h - 40);
    ctx.beginPath();
    ctx.moveTo(30, y);
    ctx.lineTo(w - 10, y);
    ctx.stroke();
    ctx.fillStyle = "#666";
    ctx.fillText(v.toFixed(2), 2, y + 4);
  }
  const n = rows.length;
  const px = (i) => 30 + (n > 1 ? i / (n - 1) : 0.5) * (w - 40);
  const py = (v) => h - 20 - v * (h - 40);
  for (const [key, color] of [["map", "#1a7f37"], ["corloc", "#7c3aed"], ["disc_acc", "#d97706"]]) {
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    let started = false;
    rows.forEach((r, i) => {
      if (r[key] === null) return;
      if (started) ctx.lineTo(px(i), py(r[key]));
      else ctx.moveTo(px(i), py(r[key]));
      started = true;
    });
    ctx.stroke();
  }
}

function runTraining() {
  $("train-summary").textContent = "training...";
  setTimeout(() => {
    const t0 = performance.now();
    const rows = call(
      train_curve,
      Number($("train-seed").value),
      Number($("train-epochs").value),
      $("train-da").checked,
      Number($("train-k").value),
    );
    if (!rows) {
      $("train-summary").textContent = "";
      return;
    }
    drawCurve(rows);
    const last = rows[rows.length - 1];
    const ms = Math.round(performance.now() - t0);
    $("train-summary").textContent =
      `final mAP ${last.map?.toFixed(3)}, CorLoc ${last.corloc?.toFixed(3)} (${rows.length} epochs, ${ms} ms)`;
  }, 10);
}

await init();
for (const id of ["scene-seed", "scene-clutter"]) $(id).addEventListener("input", drawScene);
for (const id of ["emb-scale", "emb-noise"]) $(id).addEventListener("input", drawEmbedding);
$("train-run").addEventListener("click", runTraining);
drawScene();
drawEmbedding();
runTraining();
