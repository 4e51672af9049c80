import init, { Demo, forgery_demo } from "./pkg/vsyn_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let demo = null;

function paint(canvas, rgba, boxes = []) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), canvas.width, canvas.height), 0, 0);
  ctx.strokeStyle = "#e33";
  for (const b of boxes) ctx.strokeRect(b.x + 0.5, b.y + 0.5, b.w - 1, b.h - 1);
}

function showOriginal() {
  const i = num("origPos");
  paint($("orig"), demo.original_rgba(i));
  $("origLabel").textContent = `${i} / ${demo.frame_count() - 1}`;
}

function showSynopsis() {
  if (demo.synopsis_len() === 0) return;
  const i = num("synPos");
  const boxes = JSON.parse(demo.placements(i));
  paint($("syn"), demo.synopsis_rgba(i), boxes);
  $("synLabel").textContent = `${i} / ${demo.synopsis_len() - 1}: ` + boxes.map((b) => `#${b.id}@${b.frame}`).join(" ");
}

function build() {
  demo = new Demo(num("seed"), num("agents"), num("frames"));
  const s = JSON.parse(demo.synopsize(num("cs")));
  $("summary").textContent =
    `${s.tubes} tubes; ${s.tov} frames condensed to ${s.tsv} (FR ${s.fr.toFixed(3)}) at cluster size ${s.cs}`;
  $("origPos").max = demo.frame_count() - 1;
  $("synPos").max = Math.max(0, demo.synopsis_len() - 1);
  $("synPos").value = 0;
  showOriginal();
  showSynopsis();
}

function sweep() {
  if (!demo) build();
  const rows = JSON.parse(demo.sweep(num("maxCs")));
  $("sweepTable").innerHTML =
    "<tr><th>cluster size</th><th>synopsis frames</th><th>FR</th></tr>" +
    rows.map((r) => `<tr><td>${r.cs}</td><td>${r.tsv}</td><td>${r.fr.toFixed(3)}</td></tr>`).join("");
}

function scan() {
  const out = JSON.parse(forgery_demo(num("fseed"), num("cutAt"), num("cutLen")));
  const v = out.variation;
  const c = $("plot");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const max = Math.max(...v, 1e-9);
  const x = (i) => (i / (v.length - 1)) * (c.width - 1);
  const y = (val) => c.height - 4 - (val / max) * (c.height - 8);
  ctx.fillStyle = "rgba(230, 50, 50, 0.25)";
  for (const e of out.events) ctx.fillRect(x(e.start), 0, Math.max(2, x(e.end) - x(e.start)), c.height);
  if (out.cut_at !== null) {
    ctx.strokeStyle = "#08c";
    ctx.beginPath();
    ctx.moveTo(x(out.cut_at - 1), 0);
    ctx.lineTo(x(out.cut_at - 1), c.height);
    ctx.stroke();
  }
  ctx.strokeStyle = "#222";
  ctx.beginPath();
  v.forEach((val, i) => (i ? ctx.lineTo(x(i), y(val)) : ctx.moveTo(x(i), y(val))));
  ctx.stroke();
  $("events").textContent = out.events.length
    ? out.events.map((e) => `frames ${e.start}-${e.end}: ${e.what} (score ${e.score.toFixed(2)})`).join("\n")
    : "no alarms";
}

await init();
$("build").onclick = build;
$("sweep").onclick = sweep;
$("scan").onclick = scan;
$("origPos").oninput = showOriginal;
$("synPos").oninput = showSynopsis;
build();
